//! Command implementations behind the binary: verification reports,
//! gradient checks, memory benchmarks, the toy distillation run, and the
//! token-budget calculator. Every command renders machine-readable CSV
//! into a string so outputs are byte-reproducible; the binary decides
//! where the bytes go.

use std::fmt::Write as _;
use std::path::Path;

use crate::budget::{parse_stages, token_budget};
use crate::error::{Error, Result};
use crate::fixtures::random_input_set;
use crate::io::write_checkpoint;
use crate::kernel::{kernel_backward, measure_memory, TileConfig};
use crate::ledger::linear_fit;
use crate::objectives::{self_relation_kl, HeadBatch, LossWeights, RelationTarget};
use crate::oracle::{dense_relation_kl, DENSE_ORACLE_CAP};
use crate::tensor::{MaskSpec, Precision, Tensor2D};
use crate::toy::{
    markov_tokens, relation_loss_and_grads, run_restoration, DistillHyper, RestorationConfig,
    ToyConfig, ToyModel,
};

/// Shared run parameters; a fixed config in deterministic mode fully
/// determines every output byte.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub seed: u64,
    pub precision: Precision,
    pub tile: TileConfig,
    pub d: usize,
    pub batch: usize,
    pub heads: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 42,
            precision: Precision::Double,
            tile: TileConfig::default(),
            d: 64,
            batch: 1,
            heads: 2,
        }
    }
}

/// A relative error cell; "exact" marks the 0/0 case.
#[derive(Debug, Clone, Copy, PartialEq)]
enum RelErr {
    Exact,
    Value(f64),
}

impl RelErr {
    fn of(err: f64, magnitude: f64) -> Self {
        if magnitude == 0.0 {
            if err == 0.0 {
                RelErr::Exact
            } else {
                RelErr::Value(f64::INFINITY)
            }
        } else {
            RelErr::Value(err / magnitude)
        }
    }

    fn as_value(self) -> f64 {
        match self {
            RelErr::Exact => 0.0,
            RelErr::Value(v) => v,
        }
    }
}

impl std::fmt::Display for RelErr {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            RelErr::Exact => write!(f, "exact"),
            RelErr::Value(v) => write!(f, "{v:e}"),
        }
    }
}

fn mean_abs(data: &[f64]) -> f64 {
    data.iter().map(|v| v.abs()).sum::<f64>() / data.len() as f64
}

/// Per-tensor deviation normalized by the mean magnitude of the reference,
/// reported as (mean, max).
fn tensor_errors(got: &Tensor2D, reference: &Tensor2D) -> (RelErr, RelErr) {
    let mean_mag = mean_abs(reference.data());
    let mut sum_err = 0.0;
    let mut max_err: f64 = 0.0;
    for (a, b) in got.data().iter().zip(reference.data()) {
        let e = (a - b).abs();
        sum_err += e;
        max_err = max_err.max(e);
    }
    let mean_err = sum_err / reference.data().len() as f64;
    (RelErr::of(mean_err, mean_mag), RelErr::of(max_err, mean_mag))
}

fn combine(a: RelErr, b: RelErr, f: impl Fn(f64, f64) -> f64) -> RelErr {
    match (a, b) {
        (RelErr::Exact, RelErr::Exact) => RelErr::Exact,
        _ => RelErr::Value(f(a.as_value(), b.as_value())),
    }
}

/// Numerical-verification report: kernel at the configured storage
/// precision against the double dense oracle, one CSV row per length.
pub fn cmd_verify(cfg: &RunConfig, n_list: &[usize], identical: bool) -> Result<String> {
    let mut csv = String::from("n,forward_rel_err,backward_mean_rel_err,backward_max_rel_err\n");
    for &n in n_list {
        if n > DENSE_ORACLE_CAP {
            return Err(Error::OracleCapExceeded {
                n,
                cap: DENSE_ORACLE_CAP,
            });
        }
        let [xt, yt, mut xs, mut ys] =
            random_input_set(cfg.seed.wrapping_add(n as u64), n, cfg.d, cfg.precision)?;
        if identical {
            xs = xt.clone();
            ys = yt.clone();
        }
        let mask = MaskSpec::causal(n)?;
        let kernel = kernel_backward(&xt, &yt, &xs, &ys, &mask, &cfg.tile)?;
        let oracle = dense_relation_kl(&xt, &yt, &xs, &ys, &mask)?;

        let forward = RelErr::of((kernel.loss - oracle.loss).abs(), oracle.loss.abs());
        let (mean_x, max_x) = tensor_errors(&kernel.dx, &oracle.dx);
        let (mean_y, max_y) = tensor_errors(&kernel.dy, &oracle.dy);
        let backward_mean = combine(mean_x, mean_y, |a, b| 0.5 * (a + b));
        let backward_max = combine(max_x, max_y, f64::max);
        writeln!(csv, "{n},{forward},{backward_mean},{backward_max}").unwrap();
    }
    Ok(csv)
}

/// Memory-scaling report: ledger breakdown rows per length plus kernel and
/// dense peak totals, and a linear-fit summary for the kernel column.
pub fn cmd_bench_memory(
    cfg: &RunConfig,
    n_list: &[usize],
    dense_cap: usize,
) -> Result<(String, String)> {
    let points = measure_memory(n_list, cfg.d, &cfg.tile, dense_cap, cfg.seed)?;
    let mut csv = String::from("n,d,tr,tc,buffer,elements\n");
    let (tr, tc) = (cfg.tile.tr, cfg.tile.tc);
    for point in &points {
        let n = point.n;
        for (buffer, elements) in &point.breakdown {
            writeln!(csv, "{n},{},{tr},{tc},{buffer},{elements}", cfg.d).unwrap();
        }
        writeln!(csv, "{n},{},{tr},{tc},kernel_peak,{}", cfg.d, point.kernel_peak).unwrap();
        match point.dense_peak {
            Some(p) => writeln!(csv, "{n},{},{tr},{tc},dense_peak,{p}", cfg.d).unwrap(),
            None => writeln!(csv, "{n},{},{tr},{tc},dense_peak,skipped", cfg.d).unwrap(),
        }
    }
    let mut summary = String::new();
    if points.len() >= 2 {
        let xs: Vec<f64> = points.iter().map(|p| p.n as f64).collect();
        let ys: Vec<f64> = points.iter().map(|p| p.kernel_peak as f64).collect();
        let (slope, intercept, r2) = linear_fit(&xs, &ys);
        writeln!(
            summary,
            "kernel peak fit: elements = {slope:e} * n + {intercept:e} (r2 = {r2:e})"
        )
        .unwrap();
    } else {
        writeln!(summary, "kernel peak fit: need at least two lengths").unwrap();
    }
    Ok((csv, summary))
}

/// What the fault flag breaks, to prove the suite catches regressions.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InjectedFault {
    SignFlip,
}

struct CaseRecorder {
    csv: String,
    failures: usize,
    case: usize,
}

impl CaseRecorder {
    fn new() -> Self {
        Self {
            csv: String::from("case,kind,n,d,mask,tr,tc,max_rel_err,status\n"),
            failures: 0,
            case: 0,
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn record(
        &mut self,
        kind: &str,
        n: usize,
        d: usize,
        mask: &str,
        tr: usize,
        tc: usize,
        err: RelErr,
        tolerance: f64,
    ) {
        let pass = match err {
            RelErr::Exact => true,
            RelErr::Value(v) => v <= tolerance,
        };
        if !pass {
            self.failures += 1;
        }
        writeln!(
            self.csv,
            "{},{kind},{n},{d},{mask},{tr},{tc},{err},{}",
            self.case,
            if pass { "pass" } else { "FAIL" }
        )
        .unwrap();
        self.case += 1;
    }
}

fn fd_grad<F: FnMut(&Tensor2D) -> f64>(base: &Tensor2D, mut loss: F) -> Tensor2D {
    let h = 1e-5;
    Tensor2D::from_fn(base.rows(), base.cols(), Precision::Double, |i, j| {
        let mut bump = |delta: f64| {
            let t = Tensor2D::from_fn(base.rows(), base.cols(), Precision::Double, |a, b| {
                base.get(a, b) + if (a, b) == (i, j) { delta } else { 0.0 }
            })
            .unwrap();
            loss(&t)
        };
        (bump(h) - bump(-h)) / (2.0 * h)
    })
    .unwrap()
}

/// Deviation of `got` from `reference` normalized by the largest reference
/// magnitude; the finite-difference comparison metric.
fn fd_rel_err(got: &Tensor2D, reference: &Tensor2D) -> RelErr {
    let max_mag = reference.data().iter().map(|v| v.abs()).fold(0.0, f64::max);
    let max_err = got.max_abs_diff(reference).unwrap();
    RelErr::of(max_err, max_mag)
}

fn masks_for(n: usize, which: &str) -> MaskSpec {
    match which {
        "full" => MaskSpec::full(n).unwrap(),
        "padded" => {
            let valid: Vec<bool> = (0..n).map(|i| n == 1 || i % 3 != 1).collect();
            MaskSpec::new(n, true, valid).unwrap()
        }
        _ => MaskSpec::causal(n).unwrap(),
    }
}

fn maybe_flip(t: Tensor2D, fault: Option<InjectedFault>) -> Tensor2D {
    match fault {
        Some(InjectedFault::SignFlip) => t.scaled(-1.0).unwrap(),
        None => t,
    }
}

/// Gradient-check suite: kernel vs oracle exactness, central finite
/// differences against both gradient paths, the aliased self-relation
/// combination, and the one-layer toy projection gradients. Always runs in
/// double precision. Returns the CSV report and the failure count.
pub fn cmd_grad_check(cfg: &RunConfig, fault: Option<InjectedFault>) -> Result<(String, usize)> {
    let mut rec = CaseRecorder::new();
    let seed = cfg.seed;

    // Kernel gradients against the dense oracle across a seeded grid.
    let grid = [
        (1usize, 1usize, "causal", (1usize, 1usize)),
        (1, 4, "full", (64, 64)),
        (2, 3, "causal", (7, 13)),
        (5, 2, "padded", (1, 1)),
        (8, 8, "causal", (64, 64)),
        (16, 4, "padded", (7, 13)),
        (33, 6, "causal", (7, 13)),
        (64, 8, "padded", (64, 64)),
    ];
    for (idx, &(n, d, mask_kind, (tr, tc))) in grid.iter().enumerate() {
        let [xt, yt, xs, ys] =
            random_input_set(seed.wrapping_add(1000 + idx as u64), n, d, Precision::Double)?;
        let mask = masks_for(n, mask_kind);
        let tile = TileConfig {
            tr,
            tc,
            deterministic: cfg.tile.deterministic,
        };
        let kernel = kernel_backward(&xt, &yt, &xs, &ys, &mask, &tile)?;
        let oracle = dense_relation_kl(&xt, &yt, &xs, &ys, &mask)?;
        let dx = maybe_flip(kernel.dx, fault);
        let dy = maybe_flip(kernel.dy, fault);
        let (_, max_x) = tensor_errors(&dx, &oracle.dx);
        let (_, max_y) = tensor_errors(&dy, &oracle.dy);
        let loss_err = RelErr::of((kernel.loss - oracle.loss).abs(), oracle.loss.abs());
        let worst = combine(combine(max_x, max_y, f64::max), loss_err, f64::max);
        rec.record("kernel_vs_oracle", n, d, mask_kind, tr, tc, worst, 1e-11);
    }

    // Central finite differences against the oracle and the kernel.
    for (idx, &(n, d)) in [(1usize, 2usize), (5, 3), (9, 2), (16, 3)].iter().enumerate() {
        let [xt, yt, xs, ys] =
            random_input_set(seed.wrapping_add(2000 + idx as u64), n, d, Precision::Double)?;
        let mask = masks_for(n, if idx % 2 == 0 { "causal" } else { "padded" });
        let oracle = dense_relation_kl(&xt, &yt, &xs, &ys, &mask)?;
        let kernel = kernel_backward(&xt, &yt, &xs, &ys, &mask, &cfg.tile)?;
        let fd_x = fd_grad(&xs, |bumped| {
            dense_relation_kl(&xt, &yt, bumped, &ys, &mask).unwrap().loss
        });
        let fd_y = fd_grad(&ys, |bumped| {
            dense_relation_kl(&xt, &yt, &xs, bumped, &mask).unwrap().loss
        });
        let worst_oracle = combine(
            fd_rel_err(&oracle.dx, &fd_x),
            fd_rel_err(&oracle.dy, &fd_y),
            f64::max,
        );
        rec.record("fd_vs_oracle", n, d, "mixed", cfg.tile.tr, cfg.tile.tc, worst_oracle, 1e-6);
        let worst_kernel = combine(
            fd_rel_err(&kernel.dx, &fd_x),
            fd_rel_err(&kernel.dy, &fd_y),
            f64::max,
        );
        rec.record("fd_vs_kernel", n, d, "mixed", cfg.tile.tr, cfg.tile.tc, worst_kernel, 1e-6);
    }

    // Aliased self-relation: dX + dY against finite differences.
    {
        let n = 8;
        let d = 3;
        let mut rng_seed = seed.wrapping_add(3000);
        let mut fetch = |_: &str| {
            rng_seed = rng_seed.wrapping_add(1);
            random_input_set(rng_seed, n, d, Precision::Double).map(|[a, _, _, _]| a)
        };
        let make_batch = |q: Tensor2D, k: Tensor2D, v: Tensor2D| {
            HeadBatch::new(1, 1, vec![q], vec![k], vec![v], vec![MaskSpec::causal(n).unwrap()])
        };
        let teacher = make_batch(fetch("tq")?, fetch("tk")?, fetch("tv")?)?;
        let sq = fetch("sq")?;
        let student = make_batch(sq.clone(), fetch("sk")?, fetch("sv")?)?;
        let (_, grads) = self_relation_kl(RelationTarget::Q, &teacher, &student, &cfg.tile)?;
        let fd = fd_grad(&sq, |bumped| {
            let s = make_batch(
                bumped.clone(),
                student.slice(RelationTarget::K, 0, 0).clone(),
                student.slice(RelationTarget::V, 0, 0).clone(),
            )
            .unwrap();
            self_relation_kl(RelationTarget::Q, &teacher, &s, &cfg.tile)
                .unwrap()
                .0
        });
        rec.record(
            "fd_vs_aliased_self_relation",
            n,
            d,
            "causal",
            cfg.tile.tr,
            cfg.tile.tc,
            fd_rel_err(&grads[0], &fd),
            1e-6,
        );
    }

    // One-layer toy model: local projection gradients are exact.
    {
        let toy_cfg = ToyConfig {
            layers: 1,
            heads: 1,
            head_dim: 4,
            vocab: 32,
            seq_len: 8,
            ..ToyConfig::default()
        };
        let teacher = ToyModel::seeded(toy_cfg, seed.wrapping_add(4000), 1.0)?;
        // Independent student weights keep all three projection gradients
        // away from the zero-gradient minimum of matching relations.
        let student = ToyModel::seeded(toy_cfg, seed.wrapping_add(4100), 4.0)?;
        let tokens = markov_tokens(toy_cfg.vocab, toy_cfg.seq_len, seed.wrapping_add(4001));
        let weights = LossWeights::default();
        let t_trace = teacher.forward_with_relations(&tokens)?;
        let s_trace = student.forward_with_relations(&tokens)?;
        let (_, grads, _) =
            relation_loss_and_grads(&t_trace, &s_trace, &student, &weights, &cfg.tile)?;
        let d_model = toy_cfg.model_dim();
        for (slot, grad) in [
            ("wq", &grads[0].dwq),
            ("wk", &grads[0].dwk),
            ("wv", &grads[0].dwv),
        ] {
            let fd = fd_grad(grad_base(&student, slot), |bumped| {
                let mut model = student.clone();
                match slot {
                    "wq" => model.blocks[0].wq = bumped.clone(),
                    "wk" => model.blocks[0].wk = bumped.clone(),
                    _ => model.blocks[0].wv = bumped.clone(),
                }
                let s = model.forward_with_relations(&tokens).unwrap();
                relation_loss_and_grads(&t_trace, &s, &model, &weights, &cfg.tile)
                    .unwrap()
                    .0
            });
            rec.record(
                &format!("fd_vs_toy_{slot}"),
                toy_cfg.seq_len,
                d_model,
                "causal",
                cfg.tile.tr,
                cfg.tile.tc,
                fd_rel_err(grad, &fd),
                1e-5,
            );
        }
    }

    let failures = rec.failures;
    let mut csv = rec.csv;
    writeln!(csv, "total,,,,,,,{failures} failures,{}", if failures == 0 { "pass" } else { "FAIL" })
        .unwrap();
    Ok((csv, failures))
}

fn grad_base<'m>(model: &'m ToyModel, slot: &str) -> &'m Tensor2D {
    match slot {
        "wq" => &model.blocks[0].wq,
        "wk" => &model.blocks[0].wk,
        _ => &model.blocks[0].wv,
    }
}

/// Toy restoration run: per-step metrics CSV, a summary, and optionally a
/// checkpoint of the final student.
pub fn cmd_distill_toy(
    cfg: &RunConfig,
    steps: usize,
    scale: f64,
    weights: LossWeights,
    base_lr: f64,
    seq_len: usize,
    checkpoint: Option<&Path>,
) -> Result<(String, String)> {
    let mut config = RestorationConfig::new(scale, steps, cfg.seed);
    config.model.seq_len = seq_len;
    config.hyper = DistillHyper {
        weights,
        tile: cfg.tile,
        base_lr,
        ..DistillHyper::with_steps(steps)
    };
    let outcome = run_restoration(&config)?;

    let mut csv = String::from("step,relation_kl,logit_kl,lr,grad_norm\n");
    for m in &outcome.metrics {
        writeln!(
            csv,
            "{},{:e},{:e},{:e},{:e}",
            m.step, m.relation_kl, m.logit_kl, m.lr, m.grad_norm
        )
        .unwrap();
    }
    let first = outcome.metrics.first().unwrap();
    let last = outcome.metrics.last().unwrap();
    let ratio = if first.relation_kl == 0.0 {
        0.0
    } else {
        last.relation_kl / first.relation_kl
    };
    let mut summary = String::new();
    writeln!(
        summary,
        "relation_kl: start={:e} end={:e} ratio={ratio:e}",
        first.relation_kl, last.relation_kl
    )
    .unwrap();
    writeln!(
        summary,
        "logit_kl: start={:e} end={:e}",
        first.logit_kl, last.logit_kl
    )
    .unwrap();

    if let Some(dir) = checkpoint {
        let mut entries: Vec<(String, &Tensor2D)> =
            vec![("embedding".to_string(), &outcome.student.embedding)];
        for (idx, block) in outcome.student.blocks.iter().enumerate() {
            entries.push((format!("layer{idx}.wq"), &block.wq));
            entries.push((format!("layer{idx}.wk"), &block.wk));
            entries.push((format!("layer{idx}.wv"), &block.wv));
            entries.push((format!("layer{idx}.wo"), &block.wo));
        }
        write_checkpoint(dir, &entries)?;
    }
    Ok((csv, summary))
}

/// Token-budget calculator with per-stage breakdown.
pub fn cmd_tokens(stage_spec: &str, gpus: u64) -> Result<String> {
    let stages = parse_stages(stage_spec)?;
    let mut csv = String::from("stage,ctx_len,batch,accum,steps,gpus,tokens\n");
    for (idx, stage) in stages.iter().enumerate() {
        writeln!(
            csv,
            "{idx},{},{},{},{},{gpus},{}",
            stage.ctx_len,
            stage.batch,
            stage.accum,
            stage.steps,
            stage.tokens(gpus)
        )
        .unwrap();
    }
    writeln!(csv, "total,,,,,{gpus},{}", token_budget(&stages, gpus)).unwrap();
    Ok(csv)
}
