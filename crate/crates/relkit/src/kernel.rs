//! Linear-memory two-pass KL distillation kernel.
//!
//! Phase 1 streams row-wise log-sum-exp statistics for the teacher and the
//! student. Phase 2 iterates query/key tiles, recomputes logits on the fly,
//! reconstructs probabilities as `exp(z - LSE)`, and accumulates the loss
//! and the gradients without ever materializing an n-by-n buffer. Gradient
//! ownership is partitioned by tile: query-tile units own their rows of dX
//! (and the loss partials), key-tile units own their rows of dY, and every
//! unit accumulates its contributions in a fixed serial order over the
//! opposite axis, so results are bit-identical for 1 and k workers.
//!
//! LSE values stay in double precision regardless of the storage precision;
//! tile logits, reconstructed probabilities, and the local dZ are rounded
//! through storage, and all reductions accumulate in double.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::ledger::AllocationLedger;
use crate::oracle::dense_peak_elements;
use crate::tensor::{join_precision, MaskSpec, OnlineLse, Precision, RowStats, Tensor2D};

/// Tile geometry and reduction-order policy.
#[derive(Debug, Clone, Copy)]
pub struct TileConfig {
    /// Query-tile rows.
    pub tr: usize,
    /// Key-tile columns.
    pub tc: usize,
    /// Fixed reduction order; repeated runs and any worker count produce
    /// bit-identical results. When false, the final loss reduction may be
    /// reassociated by the scheduler.
    pub deterministic: bool,
}

impl Default for TileConfig {
    fn default() -> Self {
        Self {
            tr: 64,
            tc: 64,
            deterministic: true,
        }
    }
}

impl TileConfig {
    pub fn new(tr: usize, tc: usize) -> Self {
        Self {
            tr,
            tc,
            ..Self::default()
        }
    }

    fn validate(&self) -> Result<()> {
        if self.tr == 0 || self.tc == 0 {
            return Err(Error::InvalidTile {
                tr: self.tr,
                tc: self.tc,
            });
        }
        Ok(())
    }
}

/// Loss, gradients, and the allocation ledger of one kernel invocation.
#[derive(Debug, Clone)]
pub struct KernelResult {
    pub loss: f64,
    pub dx: Tensor2D,
    pub dy: Tensor2D,
    pub ledger: AllocationLedger,
}

#[derive(Clone, Copy)]
struct Dims {
    n: usize,
    d: usize,
    scale: f64,
    precision: Precision,
    tr: usize,
    tc: usize,
}

fn check_pair(x: &Tensor2D, y: &Tensor2D, mask: &MaskSpec, cfg: &TileConfig) -> Result<Dims> {
    cfg.validate()?;
    if x.shape() != y.shape() {
        return Err(Error::ShapeMismatch {
            left: x.shape(),
            right: y.shape(),
        });
    }
    let (n, d) = x.shape();
    if mask.n() != n {
        return Err(Error::ShapeMismatch {
            left: (n, d),
            right: (mask.n(), mask.n()),
        });
    }
    mask.check_rows()?;
    Ok(Dims {
        n,
        d,
        scale: 1.0 / (d as f64).sqrt(),
        precision: join_precision(x.precision(), y.precision()),
        tr: cfg.tr.min(n),
        tc: cfg.tc.min(n),
    })
}

fn check_four(
    xt: &Tensor2D,
    yt: &Tensor2D,
    xs: &Tensor2D,
    ys: &Tensor2D,
    mask: &MaskSpec,
    cfg: &TileConfig,
) -> Result<Dims> {
    let teacher = check_pair(xt, yt, mask, cfg)?;
    let student = check_pair(xs, ys, mask, cfg)?;
    if (teacher.n, teacher.d) != (student.n, student.d) {
        return Err(Error::ShapeMismatch {
            left: (teacher.n, teacher.d),
            right: (student.n, student.d),
        });
    }
    Ok(Dims {
        precision: join_precision(teacher.precision, student.precision),
        ..teacher
    })
}

#[derive(Clone, Copy, PartialEq)]
enum TileVis {
    Skip,
    Full,
    Partial,
}

fn classify(mask: &MaskSpec, i0: usize, i1: usize, j0: usize, j1: usize) -> TileVis {
    if mask.is_causal() && j0 >= i1 {
        return TileVis::Skip;
    }
    let rows_valid: usize = (i0..i1).filter(|&i| mask.is_valid(i)).count();
    let cols_valid: usize = (j0..j1).filter(|&j| mask.is_valid(j)).count();
    if rows_valid == 0 || cols_valid == 0 {
        return TileVis::Skip;
    }
    let all_valid = rows_valid == i1 - i0 && cols_valid == j1 - j0;
    if all_valid && (!mask.is_causal() || j1 - 1 <= i0) {
        TileVis::Full
    } else {
        TileVis::Partial
    }
}

/// Fill `out[a * tc + b]` with the storage-rounded logit of query `i0 + a`
/// against key `j0 + b`; dot products accumulate in double.
#[allow(clippy::too_many_arguments)]
fn fill_tile(
    x: &Tensor2D,
    y: &Tensor2D,
    dims: &Dims,
    i0: usize,
    i1: usize,
    j0: usize,
    j1: usize,
    out: &mut [f64],
) {
    for (a, i) in (i0..i1).enumerate() {
        let xi = x.row(i);
        let row = &mut out[a * dims.tc..a * dims.tc + (j1 - j0)];
        for (b, j) in (j0..j1).enumerate() {
            let dot: f64 = xi.iter().zip(y.row(j)).map(|(p, q)| p * q).sum();
            row[b] = dims.precision.round(dims.scale * dot);
        }
    }
}

fn lse_pass(x: &Tensor2D, y: &Tensor2D, mask: &MaskSpec, dims: &Dims) -> Result<Vec<f64>> {
    let n = dims.n;
    let (tr, tc) = (dims.tr, dims.tc);
    let mut lse = vec![f64::NAN; n];
    lse.par_chunks_mut(tr)
        .enumerate()
        .try_for_each_init(
            || vec![0.0f64; tr * tc],
            |scratch, (q, lse_chunk)| -> Result<()> {
                let i0 = q * tr;
                let i1 = (i0 + tr).min(n);
                let mut accs = vec![OnlineLse::new(); i1 - i0];
                for kt in 0..n.div_ceil(tc) {
                    let j0 = kt * tc;
                    let j1 = (j0 + tc).min(n);
                    let vis = classify(mask, i0, i1, j0, j1);
                    if vis == TileVis::Skip {
                        continue;
                    }
                    fill_tile(x, y, dims, i0, i1, j0, j1, scratch);
                    for (a, i) in (i0..i1).enumerate() {
                        if !mask.is_valid(i) {
                            continue;
                        }
                        let row = &scratch[a * tc..a * tc + (j1 - j0)];
                        if vis == TileVis::Full {
                            for &z in row {
                                accs[a].update(z);
                            }
                        } else {
                            for (b, &z) in row.iter().enumerate() {
                                if mask.visible(i, j0 + b) {
                                    accs[a].update(z);
                                }
                            }
                        }
                    }
                }
                for (a, i) in (i0..i1).enumerate() {
                    if mask.is_valid(i) {
                        lse_chunk[a] = accs[a].finish().ok_or(Error::DegenerateRow { row: i })?;
                    }
                }
                Ok(())
            },
        )?;
    Ok(lse)
}

/// Streaming log-sum-exp of the masked similarity logits of one (X, Y)
/// pair, equal to the dense row statistics up to reduction order.
pub fn kernel_lse(
    x: &Tensor2D,
    y: &Tensor2D,
    mask: &MaskSpec,
    cfg: &TileConfig,
) -> Result<RowStats> {
    let dims = check_pair(x, y, mask, cfg)?;
    Ok(RowStats::from_vec(lse_pass(x, y, mask, &dims)?))
}

struct Phase1 {
    lse_t: Vec<f64>,
    lse_s: Vec<f64>,
    n_valid: usize,
}

fn phase1(
    xt: &Tensor2D,
    yt: &Tensor2D,
    xs: &Tensor2D,
    ys: &Tensor2D,
    mask: &MaskSpec,
    dims: &Dims,
    ledger: &mut AllocationLedger,
) -> Result<Phase1> {
    ledger.alloc("lse_running_stats", 2 * dims.tr);
    ledger.alloc("tile_logits", dims.tr * dims.tc);
    ledger.alloc("lse_teacher", dims.n);
    let lse_t = lse_pass(xt, yt, mask, dims)?;
    ledger.alloc("lse_student", dims.n);
    let lse_s = lse_pass(xs, ys, mask, dims)?;
    ledger.free(2 * dims.tr + dims.tr * dims.tc);
    Ok(Phase1 {
        lse_t,
        lse_s,
        n_valid: mask.n_valid(),
    })
}

/// Per-query-tile sweep producing loss partials and, when `dx` is given,
/// the rows of the student query-side gradient owned by each tile.
#[allow(clippy::too_many_arguments)]
fn query_major_sweep(
    xt: &Tensor2D,
    yt: &Tensor2D,
    xs: &Tensor2D,
    ys: &Tensor2D,
    mask: &MaskSpec,
    dims: &Dims,
    stats: &Phase1,
    mut dx: Option<&mut [f64]>,
) -> Vec<f64> {
    let n = dims.n;
    let (tr, tc) = (dims.tr, dims.tc);
    let n_valid = stats.n_valid as f64;
    let with_grad = dx.is_some();
    let mut partials = vec![0.0f64; n.div_ceil(tr)];
    // A dummy buffer keeps the zip shape uniform in the loss-only case.
    let mut dummy = Vec::new();
    let dx_buf: &mut [f64] = match dx.take() {
        Some(buf) => buf,
        None => {
            dummy.resize(n.div_ceil(tr), 0.0);
            &mut dummy
        }
    };
    let chunk = if with_grad { tr * dims.d } else { 1 };
    partials
        .par_iter_mut()
        .zip(dx_buf.par_chunks_mut(chunk))
        .enumerate()
        .for_each_init(
            || (vec![0.0f64; tr * tc], vec![0.0f64; tr * tc], vec![0.0f64; tr * tc], vec![0.0f64; tr]),
            |(zt_tile, zs_tile, dz_tile, row_loss), (q, (partial, dx_chunk))| {
                let i0 = q * tr;
                let i1 = (i0 + tr).min(n);
                row_loss[..i1 - i0].fill(0.0);
                for kt in 0..n.div_ceil(tc) {
                    let j0 = kt * tc;
                    let j1 = (j0 + tc).min(n);
                    let vis = classify(mask, i0, i1, j0, j1);
                    if vis == TileVis::Skip {
                        continue;
                    }
                    fill_tile(xt, yt, dims, i0, i1, j0, j1, zt_tile);
                    fill_tile(xs, ys, dims, i0, i1, j0, j1, zs_tile);
                    for (a, i) in (i0..i1).enumerate() {
                        if !mask.is_valid(i) {
                            if with_grad {
                                dz_tile[a * tc..a * tc + (j1 - j0)].fill(0.0);
                            }
                            continue;
                        }
                        let lt = stats.lse_t[i];
                        let ls = stats.lse_s[i];
                        for (b, j) in (j0..j1).enumerate() {
                            let cell = a * tc + b;
                            if vis == TileVis::Partial && !mask.visible(i, j) {
                                if with_grad {
                                    dz_tile[cell] = 0.0;
                                }
                                continue;
                            }
                            let log_rt = zt_tile[cell] - lt;
                            let log_rs = zs_tile[cell] - ls;
                            let rt = dims.precision.round(log_rt.exp());
                            row_loss[a] += rt * (log_rt - log_rs);
                            if with_grad {
                                let rs = dims.precision.round(log_rs.exp());
                                dz_tile[cell] = dims.precision.round((rs - rt) / n_valid);
                            }
                        }
                    }
                    if with_grad {
                        for a in 0..i1 - i0 {
                            for (b, j) in (j0..j1).enumerate() {
                                let g = dz_tile[a * tc + b];
                                if g == 0.0 {
                                    continue;
                                }
                                let y_row = ys.row(j);
                                let dst = &mut dx_chunk[a * dims.d..(a + 1) * dims.d];
                                for (acc, yv) in dst.iter_mut().zip(y_row) {
                                    *acc += dims.scale * g * yv;
                                }
                            }
                        }
                    }
                }
                *partial = row_loss[..i1 - i0].iter().sum();
            },
        );
    partials
}

/// Per-key-tile sweep producing the rows of the student key-side gradient,
/// each accumulated over query tiles in ascending order.
#[allow(clippy::too_many_arguments)]
fn key_major_sweep(
    xt: &Tensor2D,
    yt: &Tensor2D,
    xs: &Tensor2D,
    ys: &Tensor2D,
    mask: &MaskSpec,
    dims: &Dims,
    stats: &Phase1,
    dy: &mut [f64],
) {
    let n = dims.n;
    let (tr, tc) = (dims.tr, dims.tc);
    let n_valid = stats.n_valid as f64;
    dy.par_chunks_mut(tc * dims.d).enumerate().for_each_init(
        || (vec![0.0f64; tr * tc], vec![0.0f64; tr * tc]),
        |(zt_tile, zs_tile), (kt, dy_chunk)| {
            let j0 = kt * tc;
            let j1 = (j0 + tc).min(n);
            for q in 0..n.div_ceil(tr) {
                let i0 = q * tr;
                let i1 = (i0 + tr).min(n);
                let vis = classify(mask, i0, i1, j0, j1);
                if vis == TileVis::Skip {
                    continue;
                }
                fill_tile(xt, yt, dims, i0, i1, j0, j1, zt_tile);
                fill_tile(xs, ys, dims, i0, i1, j0, j1, zs_tile);
                for (a, i) in (i0..i1).enumerate() {
                    if !mask.is_valid(i) {
                        continue;
                    }
                    let lt = stats.lse_t[i];
                    let ls = stats.lse_s[i];
                    let x_row = xs.row(i);
                    for (b, j) in (j0..j1).enumerate() {
                        if vis == TileVis::Partial && !mask.visible(i, j) {
                            continue;
                        }
                        let cell = a * tc + b;
                        let rt = dims.precision.round((zt_tile[cell] - lt).exp());
                        let rs = dims.precision.round((zs_tile[cell] - ls).exp());
                        let g = dims.precision.round((rs - rt) / n_valid);
                        if g == 0.0 {
                            continue;
                        }
                        let dst = &mut dy_chunk[b * dims.d..(b + 1) * dims.d];
                        for (acc, xv) in dst.iter_mut().zip(x_row) {
                            *acc += dims.scale * g * xv;
                        }
                    }
                }
            }
        },
    );
}

fn reduce_loss(partials: Vec<f64>, n_valid: usize, deterministic: bool) -> f64 {
    if n_valid == 0 {
        return 0.0;
    }
    let total = if deterministic {
        partials.iter().sum::<f64>()
    } else {
        partials.into_par_iter().sum::<f64>()
    };
    total / n_valid as f64
}

/// Fused tiled forward pass: the row-averaged KL loss plus the allocation
/// ledger proving no quadratic buffer was used.
pub fn kernel_forward(
    xt: &Tensor2D,
    yt: &Tensor2D,
    xs: &Tensor2D,
    ys: &Tensor2D,
    mask: &MaskSpec,
    cfg: &TileConfig,
) -> Result<(f64, AllocationLedger)> {
    let dims = check_four(xt, yt, xs, ys, mask, cfg)?;
    let mut ledger = AllocationLedger::new();
    let stats = phase1(xt, yt, xs, ys, mask, &dims, &mut ledger)?;
    ledger.alloc("tile_logits_teacher", dims.tr * dims.tc);
    ledger.alloc("tile_logits_student", dims.tr * dims.tc);
    ledger.alloc("loss_partials", dims.n.div_ceil(dims.tr));
    ledger.alloc("row_loss", dims.tr);
    let partials = query_major_sweep(xt, yt, xs, ys, mask, &dims, &stats, None);
    ledger.free(2 * dims.tr * dims.tc + dims.n.div_ceil(dims.tr) + dims.tr);
    let loss = reduce_loss(partials, stats.n_valid, cfg.deterministic);
    Ok((loss, ledger))
}

/// Fused tiled backward pass: gradients w.r.t. the student factors with the
/// loss co-computed in the same sweep.
pub fn kernel_backward(
    xt: &Tensor2D,
    yt: &Tensor2D,
    xs: &Tensor2D,
    ys: &Tensor2D,
    mask: &MaskSpec,
    cfg: &TileConfig,
) -> Result<KernelResult> {
    let dims = check_four(xt, yt, xs, ys, mask, cfg)?;
    let mut ledger = AllocationLedger::new();
    let stats = phase1(xt, yt, xs, ys, mask, &dims, &mut ledger)?;

    ledger.alloc("grad_x", dims.n * dims.d);
    let mut dx = vec![0.0f64; dims.n * dims.d];
    ledger.alloc("tile_logits_teacher", dims.tr * dims.tc);
    ledger.alloc("tile_logits_student", dims.tr * dims.tc);
    ledger.alloc("tile_dz", dims.tr * dims.tc);
    ledger.alloc("loss_partials", dims.n.div_ceil(dims.tr));
    ledger.alloc("row_loss", dims.tr);
    let partials = query_major_sweep(xt, yt, xs, ys, mask, &dims, &stats, Some(&mut dx));
    ledger.free(3 * dims.tr * dims.tc + dims.n.div_ceil(dims.tr) + dims.tr);

    ledger.alloc("grad_y", dims.n * dims.d);
    let mut dy = vec![0.0f64; dims.n * dims.d];
    ledger.alloc("tile_logits_teacher", dims.tr * dims.tc);
    ledger.alloc("tile_logits_student", dims.tr * dims.tc);
    key_major_sweep(xt, yt, xs, ys, mask, &dims, &stats, &mut dy);
    ledger.free(2 * dims.tr * dims.tc);

    let loss = reduce_loss(partials, stats.n_valid, cfg.deterministic);
    Ok(KernelResult {
        loss,
        dx: Tensor2D::new(dims.n, dims.d, dx, dims.precision)?,
        dy: Tensor2D::new(dims.n, dims.d, dy, dims.precision)?,
        ledger,
    })
}

/// One row of the memory-scaling report.
#[derive(Debug, Clone)]
pub struct MemoryPoint {
    pub n: usize,
    /// Peak auxiliary elements recorded by the kernel ledger.
    pub kernel_peak: usize,
    /// Dense-oracle peak element count, None above the cap.
    pub dense_peak: Option<usize>,
    pub breakdown: Vec<(String, usize)>,
}

/// Run the backward kernel on seeded inputs across ascending sequence
/// lengths and report kernel vs dense peak element counts. The dense column
/// is the oracle's documented allocation profile and is skipped above
/// `dense_cap`.
pub fn measure_memory(
    n_values: &[usize],
    d: usize,
    cfg: &TileConfig,
    dense_cap: usize,
    seed: u64,
) -> Result<Vec<MemoryPoint>> {
    if n_values.is_empty() || n_values.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Parse {
            field: "n-list (must be non-empty and ascending)".to_string(),
        });
    }
    if n_values[0] == 0 {
        return Err(Error::InvalidShape { rows: 0, cols: d });
    }
    let mut out = Vec::with_capacity(n_values.len());
    for &n in n_values {
        let [xt, yt, xs, ys] = crate::fixtures::random_input_set(seed, n, d, Precision::Double)?;
        let mask = MaskSpec::causal(n)?;
        let result = kernel_backward(&xt, &yt, &xs, &ys, &mask, cfg)?;
        out.push(MemoryPoint {
            n,
            kernel_peak: result.ledger.peak_aux_elements(),
            dense_peak: (n <= dense_cap).then(|| dense_peak_elements(n, d)),
            breakdown: result.ledger.breakdown().to_vec(),
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::dense_relation_kl;
    use crate::tensor::row_logsumexp;
    use crate::testutil::{seeded_padded_mask, seeded_tensor, seeded_tensor_prec};

    fn dense_lse(x: &Tensor2D, y: &Tensor2D, mask: &MaskSpec) -> Vec<f64> {
        let n = mask.n();
        let d = x.cols();
        let scale = 1.0 / (d as f64).sqrt();
        let z = crate::tensor::matmul_scaled(x, y, scale).unwrap();
        let stats = row_logsumexp(mask, |i| {
            (0..n)
                .filter(|&j| mask.visible(i, j))
                .map(|j| z.get(i, j))
                .collect::<Vec<_>>()
        })
        .unwrap();
        (0..n).map(|i| stats.lse(i)).collect()
    }

    #[test]
    fn lse_single_row_norm() {
        let d = 5;
        let x = Tensor2D::new(1, d, vec![1.0; d], Precision::Double).unwrap();
        let mask = MaskSpec::full(1).unwrap();
        let stats = kernel_lse(&x, &x, &mask, &TileConfig::default()).unwrap();
        let expected = d as f64 / (d as f64).sqrt();
        assert!((stats.lse(0) - expected).abs() <= 1e-12);
    }

    #[test]
    fn lse_matches_dense_across_tiles() {
        let x = seeded_tensor(64, 8, 1);
        let y = seeded_tensor(64, 8, 2);
        let mask = seeded_padded_mask(64, 3, true);
        let reference = dense_lse(&x, &y, &mask);
        for (tr, tc) in [(16, 16), (64, 64), (7, 13), (1, 1)] {
            let stats = kernel_lse(&x, &y, &mask, &TileConfig::new(tr, tc)).unwrap();
            for i in 0..64 {
                if !mask.is_valid(i) {
                    assert!(stats.lse(i).is_nan());
                    continue;
                }
                let rel = (stats.lse(i) - reference[i]).abs() / reference[i].abs().max(1.0);
                assert!(rel <= 1e-12, "tile {tr}x{tc} row {i}: rel {rel}");
            }
        }
    }

    #[test]
    fn lse_equal_logits_closed_form() {
        // x rows all equal: every visible logit is c = |x|^2 / sqrt(d), so
        // lse(i) = c + ln(visible count).
        let d = 4;
        let n = 6;
        let x = Tensor2D::new(n, d, vec![0.5; n * d], Precision::Double).unwrap();
        let mask = MaskSpec::causal(n).unwrap();
        let c = (0.25 * d as f64) / (d as f64).sqrt();
        let stats = kernel_lse(&x, &x, &mask, &TileConfig::new(3, 2)).unwrap();
        for i in 0..n {
            let expected = c + ((i + 1) as f64).ln();
            assert!((stats.lse(i) - expected).abs() <= 1e-12);
        }
    }

    #[test]
    fn forward_zero_when_teacher_equals_student() {
        let x = seeded_tensor(128, 16, 10);
        let y = seeded_tensor(128, 16, 11);
        let mask = MaskSpec::causal(128).unwrap();
        let (loss, ledger) =
            kernel_forward(&x, &y, &x, &y, &mask, &TileConfig::default()).unwrap();
        assert!(loss.abs() <= 1e-12);
        assert!(ledger.peak_aux_elements() > 0);
    }

    #[test]
    fn forward_matches_dense_oracle() {
        let [xt, yt, xs, ys] =
            crate::fixtures::random_input_set(77, 256, 16, Precision::Double).unwrap();
        let mask = MaskSpec::causal(256).unwrap();
        let (loss, _) = kernel_forward(&xt, &yt, &xs, &ys, &mask, &TileConfig::default()).unwrap();
        let oracle = dense_relation_kl(&xt, &yt, &xs, &ys, &mask).unwrap();
        let rel = (loss - oracle.loss).abs() / oracle.loss.abs();
        assert!(rel <= 1e-12, "rel err {rel}");
    }

    #[test]
    fn backward_zero_when_teacher_equals_student() {
        let x = seeded_tensor(64, 8, 20);
        let y = seeded_tensor(64, 8, 21);
        let mask = MaskSpec::causal(64).unwrap();
        let result = kernel_backward(&x, &y, &x, &y, &mask, &TileConfig::default()).unwrap();
        assert!(result.loss.abs() <= 1e-12);
        assert!(result.dx.data().iter().all(|v| v.abs() <= 1e-12));
        assert!(result.dy.data().iter().all(|v| v.abs() <= 1e-12));
    }

    #[test]
    fn backward_matches_dense_oracle() {
        let xt = seeded_tensor(64, 8, 30);
        let yt = seeded_tensor(64, 8, 31);
        let xs = seeded_tensor(64, 8, 32);
        let ys = seeded_tensor(64, 8, 33);
        let mask = seeded_padded_mask(64, 5, true);
        let oracle = dense_relation_kl(&xt, &yt, &xs, &ys, &mask).unwrap();
        let result = kernel_backward(&xt, &yt, &xs, &ys, &mask, &TileConfig::new(16, 16)).unwrap();
        let mean_dx: f64 =
            oracle.dx.data().iter().map(|v| v.abs()).sum::<f64>() / oracle.dx.data().len() as f64;
        let err_dx = result.dx.max_abs_diff(&oracle.dx).unwrap() / mean_dx;
        let mean_dy: f64 =
            oracle.dy.data().iter().map(|v| v.abs()).sum::<f64>() / oracle.dy.data().len() as f64;
        let err_dy = result.dy.max_abs_diff(&oracle.dy).unwrap() / mean_dy;
        assert!(err_dx <= 1e-12, "dx err {err_dx}");
        assert!(err_dy <= 1e-12, "dy err {err_dy}");
        let rel_loss = (result.loss - oracle.loss).abs() / oracle.loss.abs();
        assert!(rel_loss <= 1e-12);
    }

    #[test]
    fn tile_choice_does_not_change_results() {
        let xt = seeded_tensor(40, 6, 40);
        let yt = seeded_tensor(40, 6, 41);
        let xs = seeded_tensor(40, 6, 42);
        let ys = seeded_tensor(40, 6, 43);
        let mask = seeded_padded_mask(40, 7, true);
        let base = kernel_backward(&xt, &yt, &xs, &ys, &mask, &TileConfig::new(40, 40)).unwrap();
        for (tr, tc) in [(1, 1), (7, 13), (64, 64)] {
            let other = kernel_backward(&xt, &yt, &xs, &ys, &mask, &TileConfig::new(tr, tc)).unwrap();
            assert!((base.loss - other.loss).abs() / base.loss.abs() <= 1e-11);
            assert!(base.dx.max_abs_diff(&other.dx).unwrap() <= 1e-11);
            assert!(base.dy.max_abs_diff(&other.dy).unwrap() <= 1e-11);
        }
    }

    #[test]
    fn deterministic_repeat_runs_are_bit_identical() {
        let xt = seeded_tensor(33, 5, 50);
        let yt = seeded_tensor(33, 5, 51);
        let xs = seeded_tensor(33, 5, 52);
        let ys = seeded_tensor(33, 5, 53);
        let mask = MaskSpec::causal(33).unwrap();
        let cfg = TileConfig::new(8, 8);
        let a = kernel_backward(&xt, &yt, &xs, &ys, &mask, &cfg).unwrap();
        let b = kernel_backward(&xt, &yt, &xs, &ys, &mask, &cfg).unwrap();
        assert_eq!(a.loss.to_bits(), b.loss.to_bits());
        assert_eq!(a.dx.data(), b.dx.data());
        assert_eq!(a.dy.data(), b.dy.data());
    }

    #[test]
    fn thread_count_does_not_change_bits() {
        let xt = seeded_tensor(65, 4, 60);
        let yt = seeded_tensor(65, 4, 61);
        let xs = seeded_tensor(65, 4, 62);
        let ys = seeded_tensor(65, 4, 63);
        let mask = seeded_padded_mask(65, 8, true);
        let cfg = TileConfig::new(16, 8);
        let single = rayon::ThreadPoolBuilder::new()
            .num_threads(1)
            .build()
            .unwrap()
            .install(|| kernel_backward(&xt, &yt, &xs, &ys, &mask, &cfg).unwrap());
        let four = rayon::ThreadPoolBuilder::new()
            .num_threads(4)
            .build()
            .unwrap()
            .install(|| kernel_backward(&xt, &yt, &xs, &ys, &mask, &cfg).unwrap());
        assert_eq!(single.loss.to_bits(), four.loss.to_bits());
        assert_eq!(single.dx.data(), four.dx.data());
        assert_eq!(single.dy.data(), four.dy.data());
    }

    #[test]
    fn masked_rows_cannot_influence_results() {
        let n = 24;
        let xt = seeded_tensor(n, 4, 70);
        let yt = seeded_tensor(n, 4, 71);
        let xs = seeded_tensor(n, 4, 72);
        let ys = seeded_tensor(n, 4, 73);
        let mut valid = vec![true; n];
        valid[3] = false;
        valid[17] = false;
        let mask = MaskSpec::new(n, true, valid.clone()).unwrap();
        let cfg = TileConfig::new(8, 8);
        let base = kernel_backward(&xt, &yt, &xs, &ys, &mask, &cfg).unwrap();
        // Perturb every input at the invalid positions.
        let perturb = |t: &Tensor2D, seed: u64| {
            let noise = seeded_tensor(n, 4, seed);
            Tensor2D::from_fn(n, 4, t.precision(), |i, j| {
                if valid[i] {
                    t.get(i, j)
                } else {
                    t.get(i, j) + 10.0 * noise.get(i, j)
                }
            })
            .unwrap()
        };
        let result = kernel_backward(
            &perturb(&xt, 80),
            &perturb(&yt, 81),
            &perturb(&xs, 82),
            &perturb(&ys, 83),
            &mask,
            &cfg,
        )
        .unwrap();
        assert_eq!(base.loss.to_bits(), result.loss.to_bits());
        for i in 0..n {
            if valid[i] {
                assert_eq!(base.dx.row(i), result.dx.row(i));
                assert_eq!(base.dy.row(i), result.dy.row(i));
            }
        }
    }

    #[test]
    fn tile_reconstructed_gradient_rows_sum_to_zero() {
        // Reconstruct dZ row-by-row from the kernel's own Phase-1 stats,
        // exactly as the tiled sweeps do, and check the softmax-gradient
        // zero-sum property survives the reconstruction.
        let n = 24;
        let xt = seeded_tensor(n, 5, 300);
        let yt = seeded_tensor(n, 5, 301);
        let xs = seeded_tensor(n, 5, 302);
        let ys = seeded_tensor(n, 5, 303);
        let mask = seeded_padded_mask(n, 9, true);
        let cfg = TileConfig::new(8, 8);
        let lse_t = kernel_lse(&xt, &yt, &mask, &cfg).unwrap();
        let lse_s = kernel_lse(&xs, &ys, &mask, &cfg).unwrap();
        let scale = 1.0 / 5f64.sqrt();
        let n_valid = mask.n_valid() as f64;
        for i in 0..n {
            if !mask.is_valid(i) {
                continue;
            }
            let mut row_sum = 0.0;
            for j in 0..n {
                if !mask.visible(i, j) {
                    continue;
                }
                let zt: f64 = xt.row(i).iter().zip(yt.row(j)).map(|(a, b)| a * b).sum::<f64>() * scale;
                let zs: f64 = xs.row(i).iter().zip(ys.row(j)).map(|(a, b)| a * b).sum::<f64>() * scale;
                row_sum += ((zs - lse_s.lse(i)).exp() - (zt - lse_t.lse(i)).exp()) / n_valid;
            }
            assert!(row_sum.abs() <= 1e-10, "row {i} sums to {row_sum}");
        }
    }

    #[test]
    fn ledger_stays_linear() {
        for n in [64usize, 128, 256] {
            let x = seeded_tensor(n, 8, n as u64);
            let mask = MaskSpec::causal(n).unwrap();
            let result = kernel_backward(&x, &x, &x, &x, &mask, &TileConfig::default()).unwrap();
            assert!(
                result.ledger.fits_linear_bound(n, 8, 64, 64, 2, 4, 8),
                "ledger exceeded linear bound at n={n}"
            );
        }
    }

    #[test]
    fn single_precision_stays_close_to_double_oracle() {
        let n = 128;
        let d = 16;
        let xt = seeded_tensor_prec(n, d, 90, Precision::Single);
        let yt = seeded_tensor_prec(n, d, 91, Precision::Single);
        let xs = seeded_tensor_prec(n, d, 92, Precision::Single);
        let ys = seeded_tensor_prec(n, d, 93, Precision::Single);
        let mask = MaskSpec::causal(n).unwrap();
        let oracle = dense_relation_kl(&xt, &yt, &xs, &ys, &mask).unwrap();
        let result = kernel_backward(&xt, &yt, &xs, &ys, &mask, &TileConfig::default()).unwrap();
        let rel = (result.loss - oracle.loss).abs() / oracle.loss.abs();
        assert!(rel > 0.0 && rel <= 1e-5, "forward rel err {rel}");
        assert_eq!(result.dx.precision(), Precision::Single);
    }

    #[test]
    fn measure_memory_reports_doubling_ratios() {
        // Tile scratch is a constant offset; keep n*d large against it so
        // the doubling ratio reflects the linear term.
        let cfg = TileConfig::new(16, 16);
        let points = measure_memory(&[256, 512], 16, &cfg, 4096, 1).unwrap();
        let ratio = points[1].kernel_peak as f64 / points[0].kernel_peak as f64;
        assert!(ratio > 1.8 && ratio < 2.2, "kernel ratio {ratio}");
        let dense_ratio =
            points[1].dense_peak.unwrap() as f64 / points[0].dense_peak.unwrap() as f64;
        assert!(dense_ratio > 3.6 && dense_ratio < 4.4, "dense ratio {dense_ratio}");
    }

    #[test]
    fn measure_memory_rejects_zero_and_unordered() {
        let cfg = TileConfig::default();
        assert!(matches!(
            measure_memory(&[0, 4], 4, &cfg, 4096, 1),
            Err(Error::InvalidShape { .. }) | Err(Error::Parse { .. })
        ));
        assert!(measure_memory(&[8, 4], 4, &cfg, 4096, 1).is_err());
    }

    #[test]
    fn degenerate_tile_config_is_rejected() {
        let x = seeded_tensor(4, 2, 1);
        let mask = MaskSpec::causal(4).unwrap();
        let cfg = TileConfig {
            tr: 0,
            tc: 4,
            deterministic: true,
        };
        assert!(matches!(
            kernel_lse(&x, &x, &mask, &cfg),
            Err(Error::InvalidTile { .. })
        ));
    }
}
