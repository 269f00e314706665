//! Rotary position embedding with position-interpolation scaling.
//!
//! Feature pairs (x[2t], x[2t+1]) of each row are rotated by
//! `(p / scale) * base^(-2t / d)` where `p` is the row position. Scaling
//! divides positions, so a model at scale k sees position p where an
//! unscaled model would see p / k. Rotations preserve row norms.

use crate::error::{Error, Result};
use crate::tensor::Tensor2D;

#[derive(Debug, Clone, Copy)]
pub struct RopeConfig {
    /// Head dimension; must be even.
    pub head_dim: usize,
    /// Frequency base, 10000 by default.
    pub base: f64,
    /// Position-interpolation factor k >= 1; effective position is p / k.
    pub scale: f64,
}

impl RopeConfig {
    pub fn new(head_dim: usize, base: f64, scale: f64) -> Result<Self> {
        if head_dim == 0 || !head_dim.is_multiple_of(2) {
            return Err(Error::InvalidShape {
                rows: 1,
                cols: head_dim,
            });
        }
        if base.is_nan() || base <= 0.0 || scale.is_nan() || scale < 1.0 {
            return Err(Error::NonFinite {
                what: "rope base/scale",
            });
        }
        Ok(Self {
            head_dim,
            base,
            scale,
        })
    }

    pub fn with_scale(head_dim: usize, scale: f64) -> Result<Self> {
        Self::new(head_dim, 10_000.0, scale)
    }

    /// Frequency of feature pair `t`: `base^(-2t/d)`.
    pub fn frequency(&self, pair: usize) -> f64 {
        self.base.powf(-2.0 * pair as f64 / self.head_dim as f64)
    }

    /// Rotation angle of pair `t` at integer position `p`.
    pub fn angle(&self, position: usize, pair: usize) -> f64 {
        (position as f64 / self.scale) * self.frequency(pair)
    }
}

fn rotate(x: &Tensor2D, cfg: &RopeConfig, sign: f64) -> Result<Tensor2D> {
    if x.cols() != cfg.head_dim {
        return Err(Error::ShapeMismatch {
            left: x.shape(),
            right: (x.rows(), cfg.head_dim),
        });
    }
    let mut data = Vec::with_capacity(x.rows() * x.cols());
    for p in 0..x.rows() {
        let row = x.row(p);
        for t in 0..cfg.head_dim / 2 {
            let theta = sign * cfg.angle(p, t);
            let (sin, cos) = theta.sin_cos();
            let a = row[2 * t];
            let b = row[2 * t + 1];
            data.push(a * cos - b * sin);
            data.push(a * sin + b * cos);
        }
    }
    Tensor2D::new(x.rows(), x.cols(), data, x.precision())
}

/// Rotate every row by its position-dependent angles.
pub fn rope_apply(x: &Tensor2D, cfg: &RopeConfig) -> Result<Tensor2D> {
    rotate(x, cfg, 1.0)
}

/// Inverse rotation; used to pull gradients back through the rotation.
pub fn rope_unapply(x: &Tensor2D, cfg: &RopeConfig) -> Result<Tensor2D> {
    rotate(x, cfg, -1.0)
}
