//! Dense numerics substrate: matrices, visibility masks, row statistics,
//! and the precision policy shared by every other module.
//!
//! Values are held as `f64` regardless of the storage precision tag. A
//! tensor tagged [`Precision::Single`] keeps every element exactly
//! representable as `f32` (constructors and operations round through `f32`
//! on store), while all reductions accumulate in double. This makes
//! storage rounding the only difference between the two precisions.

use crate::error::{Error, Result};

/// Storage precision of a tensor. Reductions always accumulate in double.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Precision {
    Single,
    Double,
}

impl Precision {
    /// Round a double value through the storage format.
    #[inline]
    pub fn round(self, x: f64) -> f64 {
        match self {
            Precision::Single => x as f32 as f64,
            Precision::Double => x,
        }
    }

    /// Width tag used by the RKT1 tensor file format (4 = single, 8 = double).
    pub fn tag(self) -> u8 {
        match self {
            Precision::Single => 4,
            Precision::Double => 8,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            4 => Some(Precision::Single),
            8 => Some(Precision::Double),
            _ => None,
        }
    }
}

/// Pairs a storage precision with the (always double) accumulation precision.
#[derive(Debug, Clone, Copy)]
pub struct PrecisionPolicy {
    pub storage: Precision,
}

impl PrecisionPolicy {
    pub fn new(storage: Precision) -> Self {
        Self { storage }
    }

    /// Accumulation precision; never narrower than storage.
    pub fn accumulate(&self) -> Precision {
        Precision::Double
    }
}

/// Dense row-major matrix of finite real values with a storage precision tag.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor2D {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
    precision: Precision,
}

impl Tensor2D {
    /// Build a tensor from row-major data, rounding through the storage
    /// precision and rejecting non-finite elements and empty shapes.
    pub fn new(rows: usize, cols: usize, data: Vec<f64>, precision: Precision) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::InvalidShape { rows, cols });
        }
        if data.len() != rows * cols {
            return Err(Error::DataLength {
                expected: rows * cols,
                got: data.len(),
            });
        }
        let mut data = data;
        for v in &mut data {
            *v = precision.round(*v);
            if !v.is_finite() {
                return Err(Error::NonFinite { what: "tensor data" });
            }
        }
        Ok(Self {
            rows,
            cols,
            data,
            precision,
        })
    }

    pub fn zeros(rows: usize, cols: usize, precision: Precision) -> Result<Self> {
        Self::new(rows, cols, vec![0.0; rows * cols], precision)
    }

    /// Build a tensor by evaluating `f(i, j)` at every position.
    pub fn from_fn<F: FnMut(usize, usize) -> f64>(
        rows: usize,
        cols: usize,
        precision: Precision,
        mut f: F,
    ) -> Result<Self> {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self::new(rows, cols, data, precision)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn precision(&self) -> Precision {
        self.precision
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn transpose(&self) -> Tensor2D {
        let mut data = vec![0.0; self.data.len()];
        for i in 0..self.rows {
            for j in 0..self.cols {
                data[j * self.rows + i] = self.get(i, j);
            }
        }
        Tensor2D {
            rows: self.cols,
            cols: self.rows,
            data,
            precision: self.precision,
        }
    }

    /// Elementwise sum; the result keeps the narrower storage precision.
    pub fn add(&self, rhs: &Tensor2D) -> Result<Tensor2D> {
        if self.shape() != rhs.shape() {
            return Err(Error::ShapeMismatch {
                left: self.shape(),
                right: rhs.shape(),
            });
        }
        let precision = join_precision(self.precision, rhs.precision);
        let data = self
            .data
            .iter()
            .zip(&rhs.data)
            .map(|(a, b)| a + b)
            .collect();
        Tensor2D::new(self.rows, self.cols, data, precision)
    }

    /// Elementwise scaling by a finite factor.
    pub fn scaled(&self, factor: f64) -> Result<Tensor2D> {
        if !factor.is_finite() {
            return Err(Error::NonFinite { what: "scale factor" });
        }
        let data = self.data.iter().map(|v| v * factor).collect();
        Tensor2D::new(self.rows, self.cols, data, self.precision)
    }

    /// Maximum absolute elementwise difference against another tensor.
    pub fn max_abs_diff(&self, rhs: &Tensor2D) -> Result<f64> {
        if self.shape() != rhs.shape() {
            return Err(Error::ShapeMismatch {
                left: self.shape(),
                right: rhs.shape(),
            });
        }
        Ok(self
            .data
            .iter()
            .zip(&rhs.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max))
    }
}

/// The narrower of two storage precisions.
pub fn join_precision(a: Precision, b: Precision) -> Precision {
    if a == Precision::Single || b == Precision::Single {
        Precision::Single
    } else {
        Precision::Double
    }
}

/// Visibility specification: causal flag plus per-position validity.
///
/// Masking is implemented by exclusion from reductions rather than by
/// additive negative-infinity sentinels, so masked entries contribute
/// exactly zero probability mass and no NaN can propagate.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskSpec {
    n: usize,
    causal: bool,
    valid: Vec<bool>,
}

impl MaskSpec {
    pub fn new(n: usize, causal: bool, valid: Vec<bool>) -> Result<Self> {
        if n == 0 {
            return Err(Error::InvalidShape { rows: 0, cols: 0 });
        }
        if valid.len() != n {
            return Err(Error::DataLength {
                expected: n,
                got: valid.len(),
            });
        }
        Ok(Self { n, causal, valid })
    }

    /// Causal mask with every position valid.
    pub fn causal(n: usize) -> Result<Self> {
        Self::new(n, true, vec![true; n])
    }

    /// Non-causal mask with every position valid.
    pub fn full(n: usize) -> Result<Self> {
        Self::new(n, false, vec![true; n])
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn is_causal(&self) -> bool {
        self.causal
    }

    #[inline]
    pub fn is_valid(&self, i: usize) -> bool {
        self.valid[i]
    }

    /// Key position `j` is visible to query row `i`.
    #[inline]
    pub fn visible(&self, i: usize, j: usize) -> bool {
        self.valid[i] && self.valid[j] && (!self.causal || j <= i)
    }

    /// Number of valid query rows; the normalization divisor for row-averaged losses.
    pub fn n_valid(&self) -> usize {
        self.valid.iter().filter(|v| **v).count()
    }

    pub fn visible_count(&self, i: usize) -> usize {
        (0..self.n).filter(|&j| self.visible(i, j)).count()
    }

    /// Confirm that every valid row sees at least one key position.
    ///
    /// With `visible(i, j) = valid(i) && valid(j) && (!causal || j <= i)` a
    /// valid row always sees itself, so this holds by construction; the check
    /// is kept as the guard the kernels run before streaming.
    pub fn check_rows(&self) -> Result<()> {
        for i in 0..self.n {
            if self.valid[i] && self.visible_count(i) == 0 {
                return Err(Error::DegenerateRow { row: i });
            }
        }
        Ok(())
    }
}

/// Per-row log-sum-exp statistics, the only O(n) state persisted between
/// kernel passes. Entries at invalid rows hold a NaN sentinel and must not
/// be read downstream.
#[derive(Debug, Clone)]
pub struct RowStats {
    lse: Vec<f64>,
}

impl RowStats {
    pub(crate) fn from_vec(lse: Vec<f64>) -> Self {
        Self { lse }
    }

    pub fn n(&self) -> usize {
        self.lse.len()
    }

    /// Log-sum-exp of row `i`'s visible logits. NaN at invalid rows.
    #[inline]
    pub fn lse(&self, i: usize) -> f64 {
        self.lse[i]
    }

    pub fn is_defined(&self, i: usize) -> bool {
        self.lse[i].is_finite()
    }
}

/// Streaming log-sum-exp accumulator with an online running-max update.
#[derive(Debug, Clone, Copy)]
pub struct OnlineLse {
    max: f64,
    sum: f64,
}

impl Default for OnlineLse {
    fn default() -> Self {
        Self::new()
    }
}

impl OnlineLse {
    pub fn new() -> Self {
        Self {
            max: f64::NEG_INFINITY,
            sum: 0.0,
        }
    }

    /// Fold in one logit in O(1), rescaling the running sum when the
    /// maximum moves.
    #[inline]
    pub fn update(&mut self, z: f64) {
        if z > self.max {
            self.sum = self.sum * (self.max - z).exp() + 1.0;
            self.max = z;
        } else {
            self.sum += (z - self.max).exp();
        }
    }

    pub fn is_empty(&self) -> bool {
        self.max == f64::NEG_INFINITY
    }

    /// `log(sum exp(z))` of everything folded in so far, or None if empty.
    pub fn finish(&self) -> Option<f64> {
        if self.is_empty() {
            None
        } else {
            Some(self.max + self.sum.ln())
        }
    }
}

/// Scaled similarity product `out(i, j) = scale * sum_k x(i, k) * y(j, k)`,
/// accumulated in double. This is the logit map before masking.
pub fn matmul_scaled(x: &Tensor2D, y: &Tensor2D, scale: f64) -> Result<Tensor2D> {
    if x.cols() != y.cols() {
        return Err(Error::ShapeMismatch {
            left: x.shape(),
            right: y.shape(),
        });
    }
    if !scale.is_finite() {
        return Err(Error::NonFinite { what: "scale factor" });
    }
    let precision = join_precision(x.precision(), y.precision());
    let mut data = Vec::with_capacity(x.rows() * y.rows());
    for i in 0..x.rows() {
        let xi = x.row(i);
        for j in 0..y.rows() {
            let yj = y.row(j);
            let dot: f64 = xi.iter().zip(yj).map(|(a, b)| a * b).sum();
            data.push(scale * dot);
        }
    }
    Tensor2D::new(x.rows(), y.rows(), data, precision)
}

/// Row-wise softmax over visible entries only. Invisible entries come out
/// as exact zeros; invalid rows are all-zero.
pub fn masked_row_softmax(z: &Tensor2D, mask: &MaskSpec) -> Result<Tensor2D> {
    let n = mask.n();
    if z.rows() != n || z.cols() != n {
        return Err(Error::ShapeMismatch {
            left: z.shape(),
            right: (n, n),
        });
    }
    let precision = z.precision();
    let mut out = vec![0.0; n * n];
    for i in 0..n {
        if !mask.is_valid(i) {
            continue;
        }
        let zi = z.row(i);
        let mut max = f64::NEG_INFINITY;
        for (j, &v) in zi.iter().enumerate() {
            if mask.visible(i, j) && v > max {
                max = v;
            }
        }
        if max == f64::NEG_INFINITY {
            return Err(Error::DegenerateRow { row: i });
        }
        let mut denom = 0.0;
        for (j, &v) in zi.iter().enumerate() {
            if mask.visible(i, j) {
                denom += (v - max).exp();
            }
        }
        for (j, &v) in zi.iter().enumerate() {
            if mask.visible(i, j) {
                out[i * n + j] = precision.round((v - max).exp() / denom);
            }
        }
    }
    Tensor2D::new(n, n, out, precision)
}

/// Streaming row-wise log-sum-exp. The supplier must yield the logits of
/// row `i`'s visible positions only, in key order; it is not consulted for
/// invalid rows. A valid row with an empty visible stream is degenerate.
pub fn row_logsumexp<F, I>(mask: &MaskSpec, mut visible_logits: F) -> Result<RowStats>
where
    F: FnMut(usize) -> I,
    I: IntoIterator<Item = f64>,
{
    let mut lse = vec![f64::NAN; mask.n()];
    for i in 0..mask.n() {
        if !mask.is_valid(i) {
            continue;
        }
        let mut acc = OnlineLse::new();
        for z in visible_logits(i) {
            acc.update(z);
        }
        lse[i] = acc.finish().ok_or(Error::DegenerateRow { row: i })?;
    }
    Ok(RowStats::from_vec(lse))
}
