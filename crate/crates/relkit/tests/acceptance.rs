//! Acceptance suite: one test per release criterion, each printing a
//! pass/fail line. Run with `cargo test --test acceptance -- --nocapture`
//! to see the lines; any failure fails the build.

use relkit::cli::{
    cmd_bench_memory, cmd_distill_toy, cmd_grad_check, cmd_tokens, cmd_verify, InjectedFault,
    RunConfig,
};
use relkit::fixtures::random_input_set;
use relkit::kernel::{kernel_backward, measure_memory, TileConfig};
use relkit::ledger::linear_fit;
use relkit::objectives::LossWeights;
use relkit::oracle::{dense_relation_kl, prop1_gradients};
use relkit::tensor::{MaskSpec, Precision, Tensor2D};

fn report(criterion: &str, pass: bool, detail: &str) {
    println!(
        "criterion {criterion}: {} ({detail})",
        if pass { "PASS" } else { "FAIL" }
    );
    assert!(pass, "criterion {criterion} failed: {detail}");
}

/// Max deviation of a gradient tensor normalized by the reference's mean
/// magnitude; zero tensors compare exactly.
fn grad_rel_err(got: &Tensor2D, reference: &Tensor2D) -> f64 {
    let mean: f64 =
        reference.data().iter().map(|v| v.abs()).sum::<f64>() / reference.data().len() as f64;
    let max_err = got.max_abs_diff(reference).unwrap();
    if mean == 0.0 {
        if max_err == 0.0 {
            0.0
        } else {
            f64::INFINITY
        }
    } else {
        max_err / mean
    }
}

fn padded_mask(n: usize, seed: u64) -> MaskSpec {
    if n == 1 {
        return MaskSpec::causal(1).unwrap();
    }
    let valid: Vec<bool> = (0..n).map(|i| (i as u64).wrapping_mul(seed + 7) % 5 != 3).collect();
    if valid.iter().any(|v| *v) {
        MaskSpec::new(n, true, valid).unwrap()
    } else {
        MaskSpec::causal(n).unwrap()
    }
}

#[test]
fn criterion_1_exactness_against_dense_oracle() {
    let lengths = [1usize, 2, 17, 64, 257, 512];
    let dims = [1usize, 8, 32];
    let tiles = [(1usize, 1usize), (7, 13), (64, 64)];
    let mut worst: f64 = 0.0;
    let mut cases = 0;
    'outer: for (li, &n) in lengths.iter().enumerate() {
        for (di, &d) in dims.iter().enumerate() {
            for (ti, &(tr, tc)) in tiles.iter().enumerate() {
                let case = li * 9 + di * 3 + ti;
                let seed = 9000 + case as u64;
                let [xt, yt, xs, ys] = random_input_set(seed, n, d, Precision::Double).unwrap();
                let mask = if case % 2 == 0 {
                    MaskSpec::causal(n).unwrap()
                } else {
                    padded_mask(n, seed)
                };
                let kernel =
                    kernel_backward(&xt, &yt, &xs, &ys, &mask, &TileConfig::new(tr, tc)).unwrap();
                let oracle = dense_relation_kl(&xt, &yt, &xs, &ys, &mask).unwrap();
                let loss_err = if oracle.loss == 0.0 {
                    kernel.loss.abs()
                } else {
                    (kernel.loss - oracle.loss).abs() / oracle.loss.abs()
                };
                let err = loss_err
                    .max(grad_rel_err(&kernel.dx, &oracle.dx))
                    .max(grad_rel_err(&kernel.dy, &oracle.dy));
                worst = worst.max(err);
                cases += 1;
                if cases == 50 {
                    break 'outer;
                }
            }
        }
    }
    report(
        "1 exactness",
        cases == 50 && worst <= 1e-11,
        &format!("{cases} double-precision cases, worst rel err {worst:e} <= 1e-11"),
    );
}

#[test]
fn criterion_2_single_precision_verification_table() {
    let cfg = RunConfig {
        precision: Precision::Single,
        d: 64,
        ..RunConfig::default()
    };
    let csv = cmd_verify(&cfg, &[256, 512, 1024, 2048, 4096], false).unwrap();
    let mut worst_forward: f64 = 0.0;
    let mut worst_mean: f64 = 0.0;
    let mut worst_max: f64 = 0.0;
    for line in csv.lines().skip(1) {
        let cells: Vec<&str> = line.split(',').collect();
        let forward: f64 = cells[1].parse().unwrap();
        let mean: f64 = cells[2].parse().unwrap();
        let max: f64 = cells[3].parse().unwrap();
        assert!(forward > 0.0, "single precision must not be exact: {line}");
        worst_forward = worst_forward.max(forward);
        worst_mean = worst_mean.max(mean);
        worst_max = worst_max.max(max);
    }
    report(
        "2 single-precision table",
        worst_forward <= 1e-5 && worst_mean <= 1e-5 && worst_max <= 1e-3,
        &format!(
            "forward {worst_forward:e} <= 1e-5, grad mean {worst_mean:e} <= 1e-5, grad max {worst_max:e} <= 1e-3"
        ),
    );
}

#[test]
fn criterion_3_memory_scaling_is_linear() {
    let lengths = [1024usize, 2048, 4096, 8192, 16384];
    let cfg = TileConfig::new(32, 32);
    let points = measure_memory(&lengths, 8, &cfg, 4096, 77).unwrap();

    let xs: Vec<f64> = points.iter().map(|p| p.n as f64).collect();
    let ys: Vec<f64> = points.iter().map(|p| p.kernel_peak as f64).collect();
    let (slope, intercept, r2) = linear_fit(&xs, &ys);

    let kernel_ratio = points[2].kernel_peak as f64 / points[1].kernel_peak as f64;
    let dense_ratio =
        points[2].dense_peak.unwrap() as f64 / points[1].dense_peak.unwrap() as f64;
    assert!(points[3].dense_peak.is_none() && points[4].dense_peak.is_none());
    let pass = r2 >= 0.99
        && (1.8..=2.2).contains(&kernel_ratio)
        && (3.6..=4.4).contains(&dense_ratio);
    report(
        "3 memory linearity",
        pass,
        &format!(
            "fit {slope:.2}n+{intercept:.0} r2={r2:.6}, kernel 2048->4096 ratio {kernel_ratio:.3} in [1.8,2.2], dense ratio {dense_ratio:.3} in [3.6,4.4], dense capped past 4096"
        ),
    );
}

#[test]
fn criterion_4_gradient_checks() {
    let cfg = RunConfig {
        d: 8,
        ..RunConfig::default()
    };
    let (csv, failures) = cmd_grad_check(&cfg, None).unwrap();
    assert!(csv.contains(",1,"), "n=1 edge case must be present");
    let (_, injected) = cmd_grad_check(&cfg, Some(InjectedFault::SignFlip)).unwrap();
    report(
        "4 gradient checks",
        failures == 0 && injected >= 1,
        &format!("clean run {failures} failures, sign-flip fault produced {injected}"),
    );
}

#[test]
fn criterion_5_sparse_gradient_behavior() {
    let r_t = 0.9;
    let mut prev = f64::INFINITY;
    let mut monotone = true;
    let mut mse_at_1e6 = f64::NAN;
    let mut tail_ok = true;
    for k in 1..=8 {
        let r_s = 10f64.powi(-k);
        let (g_mse, g_kl) = prop1_gradients(r_t, r_s).unwrap();
        if g_mse.abs() >= prev {
            monotone = false;
        }
        prev = g_mse.abs();
        if k == 6 {
            mse_at_1e6 = g_mse.abs();
        }
        if r_s <= 1e-7 && (g_kl + r_t).abs() > 1e-7 {
            tail_ok = false;
        }
    }
    report(
        "5 sparse-regime gradients",
        monotone && mse_at_1e6 <= 1e-6 && tail_ok,
        &format!(
            "|g_mse| strictly decreasing, {mse_at_1e6:e} <= 1e-6 at r_s=1e-6, |g_kl + r_t| <= 1e-7 in the tail"
        ),
    );
}

fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut va = 0.0;
    let mut vb = 0.0;
    for (x, y) in a.iter().zip(b) {
        cov += (x - ma) * (y - mb);
        va += (x - ma) * (x - ma);
        vb += (y - mb) * (y - mb);
    }
    cov / (va * vb).sqrt()
}

#[test]
fn criterion_6_toy_restoration() {
    let cfg = RunConfig::default();
    let (csv, _) =
        cmd_distill_toy(&cfg, 200, 4.0, LossWeights::default(), 2e-3, 128, None).unwrap();
    let mut relation = Vec::new();
    let mut logit = Vec::new();
    for line in csv.lines().skip(1) {
        let cells: Vec<&str> = line.split(',').collect();
        relation.push(cells[1].parse::<f64>().unwrap());
        logit.push(cells[2].parse::<f64>().unwrap());
    }
    assert_eq!(relation.len(), 200);
    let ratio = relation[199] / relation[0];
    let logit_down = logit[199] < logit[0];
    let corr = pearson(&relation, &logit);
    report(
        "6 toy restoration",
        ratio <= 0.1 && logit_down && corr > 0.0,
        &format!(
            "relation KL ratio {ratio:.4} <= 0.1, logit KL {:.3e} -> {:.3e} (down), pearson {corr:.3} > 0",
            logit[0], logit[199]
        ),
    );
}

#[test]
fn criterion_7_byte_identical_csv_across_threads() {
    let run_all = || -> Vec<String> {
        let cfg = RunConfig {
            d: 8,
            ..RunConfig::default()
        };
        let (bench_csv, bench_summary) = cmd_bench_memory(&cfg, &[64, 128], 4096).unwrap();
        let (grad_csv, _) = cmd_grad_check(&cfg, None).unwrap();
        let (toy_csv, toy_summary) =
            cmd_distill_toy(&cfg, 3, 4.0, LossWeights::default(), 2e-3, 32, None).unwrap();
        vec![
            cmd_verify(&cfg, &[64, 96], false).unwrap(),
            bench_csv,
            bench_summary,
            grad_csv,
            toy_csv,
            toy_summary,
            cmd_tokens("1024,2,4,100;4096,1,2,50", 2).unwrap(),
        ]
    };
    let with_threads = |threads: usize| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap()
            .install(run_all)
    };
    let one_a = with_threads(1);
    let one_b = with_threads(1);
    let four_a = with_threads(4);
    let four_b = with_threads(4);
    let identical = one_a == one_b && four_a == four_b && one_a == four_a;
    report(
        "7 determinism",
        identical,
        "every command CSV byte-identical across reruns at 1 and 4 threads",
    );
}

#[test]
fn criterion_8_token_accounting() {
    let csv = cmd_tokens("1024,2,4,100;4096,1,2,50", 2).unwrap();
    let two_stage = csv.contains("0,1024,2,4,100,2,1638400")
        && csv.contains("1,4096,1,2,50,2,819200")
        && csv.trim_end().ends_with("total,,,,,2,2457600");
    let zero = cmd_tokens("", 1).unwrap().trim_end().ends_with("total,,,,,1,0");
    let single = cmd_tokens("1024,1,1,10", 1)
        .unwrap()
        .contains("0,1024,1,1,10,1,10240");
    report(
        "8 token accounting",
        two_stage && zero && single,
        "hand-multiplied budgets reproduced, including the zero-stage case",
    );
}
