//! Quadratic-memory reference implementation of the relation-KL objective
//! and its gradients, used as ground truth by the exactness and gradient
//! suites. Everything here computes internally in double precision no
//! matter how the inputs are tagged, so it never shares rounding with the
//! tiled kernel under test. Memory is O(n^2) by design; tests and the CLI
//! cap it at `DENSE_ORACLE_CAP`.

use crate::error::{Error, Result};
use crate::tensor::{masked_row_softmax, matmul_scaled, MaskSpec, Precision, Tensor2D};

/// Largest sequence length the dense oracle will accept.
pub const DENSE_ORACLE_CAP: usize = 4096;

/// Probability floor applied to the student only, inside the log, so the
/// loss stays finite when the student underflows where the teacher has mass.
/// The gradient formula needs no clamp.
const STUDENT_LOG_FLOOR: f64 = 1e-30;

/// Loss plus dense gradients of the row-averaged forward KL.
#[derive(Debug, Clone)]
pub struct DenseKLReport {
    /// Row-averaged forward KL over valid rows.
    pub loss: f64,
    /// Gradient w.r.t. the student logits, `(R_s - R_t) / n_valid` at
    /// visible entries and zero elsewhere. Each valid row sums to zero.
    pub d_zs: Tensor2D,
    /// Gradient w.r.t. the student's query-side factor.
    pub dx: Tensor2D,
    /// Gradient w.r.t. the student's key-side factor.
    pub dy: Tensor2D,
}

fn upcast(t: &Tensor2D) -> Tensor2D {
    Tensor2D::new(t.rows(), t.cols(), t.data().to_vec(), Precision::Double)
        .expect("finite data stays finite")
}

fn check_inputs(xt: &Tensor2D, yt: &Tensor2D, xs: &Tensor2D, ys: &Tensor2D, mask: &MaskSpec) -> Result<(usize, usize)> {
    let (n, d) = xt.shape();
    for t in [yt, xs, ys] {
        if t.shape() != (n, d) {
            return Err(Error::ShapeMismatch {
                left: (n, d),
                right: t.shape(),
            });
        }
    }
    if mask.n() != n {
        return Err(Error::ShapeMismatch {
            left: (n, d),
            right: (mask.n(), mask.n()),
        });
    }
    if n > DENSE_ORACLE_CAP {
        return Err(Error::OracleCapExceeded {
            n,
            cap: DENSE_ORACLE_CAP,
        });
    }
    mask.check_rows()?;
    Ok((n, d))
}

/// Row-averaged forward KL between teacher and student relation
/// distributions, with dense analytic gradients.
///
/// `loss = (1/n_valid) * sum_i KL(R_t(i,:) || R_s(i,:))` over valid rows,
/// where `R_m = softmax((1/sqrt(d)) X_m Y_m^T)` restricted to visible keys.
pub fn dense_relation_kl(
    xt: &Tensor2D,
    yt: &Tensor2D,
    xs: &Tensor2D,
    ys: &Tensor2D,
    mask: &MaskSpec,
) -> Result<DenseKLReport> {
    let (n, d) = check_inputs(xt, yt, xs, ys, mask)?;
    let scale = 1.0 / (d as f64).sqrt();
    let n_valid = mask.n_valid();
    if n_valid == 0 {
        // Nothing visible anywhere: zero loss, zero gradients.
        return Ok(DenseKLReport {
            loss: 0.0,
            d_zs: Tensor2D::zeros(n, n, Precision::Double)?,
            dx: Tensor2D::zeros(n, d, Precision::Double)?,
            dy: Tensor2D::zeros(n, d, Precision::Double)?,
        });
    }

    let xs_d = upcast(xs);
    let ys_d = upcast(ys);

    let rt = {
        let zt = matmul_scaled(&upcast(xt), &upcast(yt), scale)?;
        masked_row_softmax(&zt, mask)?
    };
    let rs = {
        let zs = matmul_scaled(&xs_d, &ys_d, scale)?;
        masked_row_softmax(&zs, mask)?
    };

    let mut loss = 0.0;
    for i in 0..n {
        if !mask.is_valid(i) {
            continue;
        }
        let mut row_kl = 0.0;
        for j in 0..n {
            if !mask.visible(i, j) {
                continue;
            }
            let p = rt.get(i, j);
            if p > 0.0 {
                let q = rs.get(i, j).max(STUDENT_LOG_FLOOR);
                row_kl += p * (p.ln() - q.ln());
            }
        }
        loss += row_kl;
    }
    loss /= n_valid as f64;

    let d_zs = Tensor2D::from_fn(n, n, Precision::Double, |i, j| {
        if mask.visible(i, j) {
            (rs.get(i, j) - rt.get(i, j)) / n_valid as f64
        } else {
            0.0
        }
    })?;
    drop(rt);
    drop(rs);

    let mut dx = vec![0.0; n * d];
    let mut dy = vec![0.0; n * d];
    for i in 0..n {
        let g_row = d_zs.row(i);
        for j in 0..n {
            let g = g_row[j];
            if g == 0.0 {
                continue;
            }
            let ys_row = ys_d.row(j);
            let xs_row = xs_d.row(i);
            for k in 0..d {
                dx[i * d + k] += scale * g * ys_row[k];
                dy[j * d + k] += scale * g * xs_row[k];
            }
        }
    }

    Ok(DenseKLReport {
        loss,
        d_zs,
        dx: Tensor2D::new(n, d, dx, Precision::Double)?,
        dy: Tensor2D::new(n, d, dy, Precision::Double)?,
    })
}

/// Attention-map KL: the relation objective instantiated with the (Q, K)
/// pair instead of a self-relation. Evaluated only in ablation-style tests.
pub fn dense_attention_kl(
    qt: &Tensor2D,
    kt: &Tensor2D,
    qs: &Tensor2D,
    ks: &Tensor2D,
    mask: &MaskSpec,
) -> Result<DenseKLReport> {
    dense_relation_kl(qt, kt, qs, ks, mask)
}

/// Peak auxiliary element count of `dense_relation_kl` as a function of
/// shape: four double upcasts of the inputs (4nd) plus the widest moment
/// where `rt`, `zs`, and `rs` are live at once (3n^2). Used for the dense
/// column of the memory-scaling report without actually allocating it.
pub fn dense_peak_elements(n: usize, d: usize) -> usize {
    3 * n * n + 4 * n * d
}

/// Temperature-scaled KL divergence between softmaxed logit vectors,
/// `D_KL(softmax(zt/T) || softmax(zs/T))`.
pub fn logit_kl(zt: &[f64], zs: &[f64], temperature: f64) -> Result<f64> {
    if temperature.is_nan() || temperature <= 0.0 {
        return Err(Error::NonPositiveTemperature { temperature });
    }
    if zt.is_empty() || zt.len() != zs.len() {
        return Err(Error::DataLength {
            expected: zt.len().max(1),
            got: zs.len(),
        });
    }
    if zt.iter().chain(zs).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite { what: "logits" });
    }
    let scaled_lse = |z: &[f64]| {
        let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max) / temperature;
        max + z.iter().map(|v| (v / temperature - max).exp()).sum::<f64>().ln()
    };
    let lse_t = scaled_lse(zt);
    let lse_s = scaled_lse(zs);
    let mut kl = 0.0;
    for (a, b) in zt.iter().zip(zs) {
        let log_p = a / temperature - lse_t;
        let log_q = b / temperature - lse_s;
        kl += log_p.exp() * (log_p - log_q);
    }
    Ok(kl)
}

/// Closed-form per-entry gradients contrasting probability-MSE with forward
/// KL: `g_mse = (r_s - r_t) r_s (1 - r_s)` and `g_kl = r_s - r_t`. As the
/// student probability vanishes with the teacher's fixed, the MSE gradient
/// decays to zero while the KL gradient tends to `-r_t`.
pub fn prop1_gradients(r_t: f64, r_s: f64) -> Result<(f64, f64)> {
    if r_t.is_nan() || r_t <= 0.0 || r_t >= 1.0 {
        return Err(Error::ProbabilityOutOfRange {
            name: "r_t",
            value: r_t,
        });
    }
    if r_s.is_nan() || r_s <= 0.0 || r_s >= 1.0 {
        return Err(Error::ProbabilityOutOfRange {
            name: "r_s",
            value: r_s,
        });
    }
    let g_mse = (r_s - r_t) * r_s * (1.0 - r_s);
    let g_kl = r_s - r_t;
    Ok((g_mse, g_kl))
}
