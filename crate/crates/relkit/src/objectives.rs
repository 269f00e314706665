//! Training objectives composed from the kernel: Q/Q, K/K, V/V
//! self-relation KLs, the weighted overall loss, and batch/head averaging.
//!
//! Because a self-relation passes the same student tensor as both kernel
//! arguments, the gradient w.r.t. that tensor is the sum dX + dY (the chain
//! rule for aliased arguments). Per-slice losses are averaged over heads
//! and batch elements; weights multiply after averaging.

use crate::error::{Error, Result};
use crate::kernel::{kernel_backward, TileConfig};
use crate::tensor::{MaskSpec, Tensor2D};

/// Which self-relation to distill.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RelationTarget {
    Q,
    K,
    V,
}

impl RelationTarget {
    pub fn as_str(self) -> &'static str {
        match self {
            RelationTarget::Q => "q",
            RelationTarget::K => "k",
            RelationTarget::V => "v",
        }
    }
}

/// Per-(batch, head) Q/K/V slices with one mask per batch element; heads
/// share masks.
#[derive(Debug, Clone)]
pub struct HeadBatch {
    batch: usize,
    heads: usize,
    n: usize,
    d: usize,
    q: Vec<Tensor2D>,
    k: Vec<Tensor2D>,
    v: Vec<Tensor2D>,
    masks: Vec<MaskSpec>,
}

impl HeadBatch {
    pub fn new(
        batch: usize,
        heads: usize,
        q: Vec<Tensor2D>,
        k: Vec<Tensor2D>,
        v: Vec<Tensor2D>,
        masks: Vec<MaskSpec>,
    ) -> Result<Self> {
        if batch == 0 || heads == 0 {
            return Err(Error::InvalidShape {
                rows: batch,
                cols: heads,
            });
        }
        let slices = batch * heads;
        for (buf, len) in [(&q, slices), (&k, slices), (&v, slices)] {
            if buf.len() != len {
                return Err(Error::DataLength {
                    expected: len,
                    got: buf.len(),
                });
            }
        }
        if masks.len() != batch {
            return Err(Error::DataLength {
                expected: batch,
                got: masks.len(),
            });
        }
        let (n, d) = q[0].shape();
        for t in q.iter().chain(&k).chain(&v) {
            if t.shape() != (n, d) {
                return Err(Error::ShapeMismatch {
                    left: (n, d),
                    right: t.shape(),
                });
            }
        }
        for mask in &masks {
            if mask.n() != n {
                return Err(Error::ShapeMismatch {
                    left: (n, d),
                    right: (mask.n(), mask.n()),
                });
            }
        }
        Ok(Self {
            batch,
            heads,
            n,
            d,
            q,
            k,
            v,
            masks,
        })
    }

    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn slice(&self, target: RelationTarget, b: usize, h: usize) -> &Tensor2D {
        let idx = b * self.heads + h;
        match target {
            RelationTarget::Q => &self.q[idx],
            RelationTarget::K => &self.k[idx],
            RelationTarget::V => &self.v[idx],
        }
    }

    pub fn mask(&self, b: usize) -> &MaskSpec {
        &self.masks[b]
    }

    fn same_shape(&self, other: &HeadBatch) -> bool {
        self.batch == other.batch
            && self.heads == other.heads
            && self.n == other.n
            && self.d == other.d
            && self.masks == other.masks
    }
}

/// Scalar weights of the three relation terms. Default (1, 1, 1).
#[derive(Debug, Clone, Copy)]
pub struct LossWeights {
    pub lambda_q: f64,
    pub lambda_k: f64,
    pub lambda_v: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_q: 1.0,
            lambda_k: 1.0,
            lambda_v: 1.0,
        }
    }
}

impl LossWeights {
    pub fn new(lambda_q: f64, lambda_k: f64, lambda_v: f64) -> Result<Self> {
        for (name, value) in [
            ("lambda_q", lambda_q),
            ("lambda_k", lambda_k),
            ("lambda_v", lambda_v),
        ] {
            if value.is_nan() || value < 0.0 || !value.is_finite() {
                return Err(Error::NegativeWeight { name, value });
            }
        }
        Ok(Self {
            lambda_q,
            lambda_k,
            lambda_v,
        })
    }
}

/// One self-relation objective: the kernel applied per (b, h) slice with
/// (X, Y) both set to the selected tensor. Returns the loss averaged over
/// slices and, per slice, the gradient dX + dY w.r.t. the student tensor,
/// already divided by the slice count. The frozen teacher gets no gradient.
pub fn self_relation_kl(
    target: RelationTarget,
    teacher: &HeadBatch,
    student: &HeadBatch,
    cfg: &TileConfig,
) -> Result<(f64, Vec<Tensor2D>)> {
    if !teacher.same_shape(student) {
        return Err(Error::ShapeMismatch {
            left: (teacher.batch * teacher.heads, teacher.n),
            right: (student.batch * student.heads, student.n),
        });
    }
    let slices = (teacher.batch * teacher.heads) as f64;
    let mut loss = 0.0;
    let mut grads = Vec::with_capacity(teacher.batch * teacher.heads);
    for b in 0..teacher.batch {
        for h in 0..teacher.heads {
            let t = teacher.slice(target, b, h);
            let s = student.slice(target, b, h);
            let result = kernel_backward(t, t, s, s, student.mask(b), cfg)?;
            loss += result.loss;
            grads.push(result.dx.add(&result.dy)?.scaled(1.0 / slices)?);
        }
    }
    Ok((loss / slices, grads))
}

/// Per-slice gradients of the weighted overall objective.
#[derive(Debug, Clone)]
pub struct OverallGrads {
    pub dq: Vec<Tensor2D>,
    pub dk: Vec<Tensor2D>,
    pub dv: Vec<Tensor2D>,
}

/// Weighted sum of the three self-relation losses,
/// `lambda_q * L_Q + lambda_k * L_K + lambda_v * L_V`, with gradients
/// scaled accordingly. Targets with zero weight are skipped and contribute
/// zero gradients.
pub fn overall_loss(
    teacher: &HeadBatch,
    student: &HeadBatch,
    weights: &LossWeights,
    cfg: &TileConfig,
) -> Result<(f64, OverallGrads)> {
    // Re-validate; LossWeights can be constructed literally.
    let weights = LossWeights::new(weights.lambda_q, weights.lambda_k, weights.lambda_v)?;
    let mut total = 0.0;
    let mut run = |target: RelationTarget, lambda: f64| -> Result<Vec<Tensor2D>> {
        if lambda == 0.0 {
            return (0..teacher.batch * teacher.heads)
                .map(|_| Tensor2D::zeros(teacher.n, teacher.d, student.slice(target, 0, 0).precision()))
                .collect();
        }
        let (loss, grads) = self_relation_kl(target, teacher, student, cfg)?;
        total += lambda * loss;
        grads.into_iter().map(|g| g.scaled(lambda)).collect()
    };
    let dq = run(RelationTarget::Q, weights.lambda_q)?;
    let dk = run(RelationTarget::K, weights.lambda_k)?;
    let dv = run(RelationTarget::V, weights.lambda_v)?;
    Ok((total, OverallGrads { dq, dk, dv }))
}
