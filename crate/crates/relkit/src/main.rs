use std::io::Write as _;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use relkit::cli::{
    cmd_bench_memory, cmd_distill_toy, cmd_grad_check, cmd_tokens, cmd_verify, InjectedFault,
    RunConfig,
};
use relkit::error::Error;
use relkit::objectives::LossWeights;
use relkit::tensor::Precision;
use relkit::TileConfig;

/// Linear-memory relation-KL distillation kit: verification reports,
/// gradient checks, memory benchmarks, and a toy RoPE-restoration run.
/// Random fixtures come from a seed-pinned ChaCha8 generator, so every
/// command is reproducible byte-for-byte in deterministic mode.
#[derive(Parser)]
#[command(name = "relkit", version)]
struct Args {
    /// Seed for all random fixtures.
    #[arg(long, global = true, default_value_t = 42)]
    seed: u64,

    /// Storage precision of generated inputs and kernel tiles.
    #[arg(long, global = true, value_parser = parse_precision, default_value = "double")]
    precision: Precision,

    /// Tile shape TRxTC, e.g. 64x64.
    #[arg(long, global = true, value_parser = parse_tile, default_value = "64x64")]
    tile: (usize, usize),

    /// Worker threads; 0 uses the runtime default.
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,

    /// Fixed reduction order (bit-identical reruns at any thread count).
    #[arg(long, global = true, default_value_t = true, action = clap::ArgAction::Set)]
    deterministic: bool,

    /// Write the primary CSV here instead of stdout.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Compare the kernel against the double-precision dense oracle.
    Verify {
        /// Comma-separated sequence lengths.
        #[arg(long, value_delimiter = ',', default_value = "256,512,1024,2048,4096")]
        n_list: Vec<usize>,
        /// Head dimension of the generated inputs.
        #[arg(long, default_value_t = 64)]
        d: usize,
        /// Use an identical teacher/student fixture (expects exact zeros).
        #[arg(long)]
        identical: bool,
    },
    /// Report ledger memory scaling across sequence lengths.
    BenchMemory {
        #[arg(long, value_delimiter = ',', default_value = "1024,2048,4096,8192,16384")]
        n_list: Vec<usize>,
        #[arg(long, default_value_t = 64)]
        d: usize,
        /// Dense column is marked "skipped" above this length.
        #[arg(long, default_value_t = 4096)]
        dense_cap: usize,
    },
    /// Run the oracle/kernel/finite-difference gradient suites.
    GradCheck {
        /// Deliberately corrupt kernel gradients to prove detection.
        #[arg(long, value_parser = parse_fault)]
        inject_fault: Option<InjectedFault>,
    },
    /// Distill a RoPE-scaled toy student toward its native teacher.
    DistillToy {
        #[arg(long, default_value_t = 200)]
        steps: usize,
        /// RoPE position-interpolation factor of the student.
        #[arg(long, default_value_t = 4.0)]
        scale: f64,
        #[arg(long, default_value_t = 1.0)]
        lambda_q: f64,
        #[arg(long, default_value_t = 1.0)]
        lambda_k: f64,
        #[arg(long, default_value_t = 1.0)]
        lambda_v: f64,
        /// Base learning rate of the warmup/cosine schedule.
        #[arg(long, default_value_t = 2e-3)]
        lr: f64,
        /// Token sequence length (within the teacher-native range).
        #[arg(long, default_value_t = 128)]
        n: usize,
        /// Write the final student checkpoint (RKT1 files + manifest) here.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Evaluate the staged token budget.
    Tokens {
        /// Semicolon-separated L,B,A,U quadruples.
        #[arg(long)]
        stages: String,
        #[arg(long, default_value_t = 1)]
        gpus: u64,
    },
}

fn parse_precision(raw: &str) -> Result<Precision, String> {
    match raw {
        "single" => Ok(Precision::Single),
        "double" => Ok(Precision::Double),
        other => Err(format!("unknown precision {other:?} (single|double)")),
    }
}

fn parse_tile(raw: &str) -> Result<(usize, usize), String> {
    let (tr, tc) = raw
        .split_once(['x', 'X'])
        .ok_or_else(|| format!("tile must look like 64x64, got {raw:?}"))?;
    let parse = |s: &str| {
        s.trim()
            .parse::<usize>()
            .map_err(|_| format!("bad tile dimension {s:?}"))
    };
    Ok((parse(tr)?, parse(tc)?))
}

fn parse_fault(raw: &str) -> Result<InjectedFault, String> {
    match raw {
        "sign-flip" => Ok(InjectedFault::SignFlip),
        other => Err(format!("unknown fault {other:?} (sign-flip)")),
    }
}

fn exit_code_for(error: &Error) -> u8 {
    match error {
        Error::Parse { .. } | Error::OracleCapExceeded { .. } => 2,
        Error::DegenerateRow { .. }
        | Error::InvalidShape { .. }
        | Error::InvalidTile { .. }
        | Error::DataLength { .. }
        | Error::ShapeMismatch { .. }
        | Error::NonFinite { .. }
        | Error::TokenOutOfRange { .. }
        | Error::NonPositiveTemperature { .. }
        | Error::ProbabilityOutOfRange { .. }
        | Error::NegativeWeight { .. } => 3,
        _ => 1,
    }
}

fn emit(csv: &str, out: Option<&PathBuf>) -> std::io::Result<()> {
    match out {
        Some(path) => std::fs::write(path, csv),
        None => std::io::stdout().write_all(csv.as_bytes()),
    }
}

fn run(args: &Args) -> Result<u8, Error> {
    let cfg = RunConfig {
        seed: args.seed,
        precision: args.precision,
        tile: TileConfig {
            tr: args.tile.0,
            tc: args.tile.1,
            deterministic: args.deterministic,
        },
        ..RunConfig::default()
    };
    match &args.command {
        Command::Verify {
            n_list,
            d,
            identical,
        } => {
            let cfg = RunConfig { d: *d, ..cfg };
            let csv = cmd_verify(&cfg, n_list, *identical)?;
            emit(&csv, args.out.as_ref())?;
            Ok(0)
        }
        Command::BenchMemory {
            n_list,
            d,
            dense_cap,
        } => {
            let cfg = RunConfig { d: *d, ..cfg };
            let (csv, summary) = cmd_bench_memory(&cfg, n_list, *dense_cap)?;
            emit(&csv, args.out.as_ref())?;
            print!("{summary}");
            Ok(0)
        }
        Command::GradCheck { inject_fault } => {
            let (csv, failures) = cmd_grad_check(&cfg, *inject_fault)?;
            emit(&csv, args.out.as_ref())?;
            if failures > 0 {
                eprintln!("grad-check: {failures} failures");
                Ok(1)
            } else {
                Ok(0)
            }
        }
        Command::DistillToy {
            steps,
            scale,
            lambda_q,
            lambda_k,
            lambda_v,
            lr,
            n,
            checkpoint,
        } => {
            if *steps == 0 {
                return Err(Error::Parse {
                    field: "steps (must be >= 1)".to_string(),
                });
            }
            let weights = LossWeights::new(*lambda_q, *lambda_k, *lambda_v)?;
            let (csv, summary) =
                cmd_distill_toy(&cfg, *steps, *scale, weights, *lr, *n, checkpoint.as_deref())?;
            emit(&csv, args.out.as_ref())?;
            print!("{summary}");
            Ok(0)
        }
        Command::Tokens { stages, gpus } => {
            let csv = cmd_tokens(stages, *gpus)?;
            emit(&csv, args.out.as_ref())?;
            Ok(0)
        }
    }
}

fn main() -> ExitCode {
    let args = Args::parse();
    let outcome = if args.threads > 0 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(args.threads)
            .build()
            .expect("thread pool");
        pool.install(|| run(&args))
    } else {
        run(&args)
    };
    match outcome {
        Ok(code) => ExitCode::from(code),
        Err(error) => {
            eprintln!("error: {error}");
            ExitCode::from(exit_code_for(&error))
        }
    }
}
