//! Deterministic fixtures shared by unit tests. Test code only.

use crate::tensor::{MaskSpec, Precision, Tensor2D};

/// Splitmix64 step; enough randomness for test fixtures and fully portable.
fn next(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9e3779b97f4a7c15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

pub fn uniform(state: &mut u64) -> f64 {
    (next(state) >> 11) as f64 / (1u64 << 53) as f64 * 2.0 - 1.0
}

pub fn seeded_tensor(rows: usize, cols: usize, seed: u64) -> Tensor2D {
    seeded_tensor_prec(rows, cols, seed, Precision::Double)
}

pub fn seeded_tensor_prec(rows: usize, cols: usize, seed: u64, precision: Precision) -> Tensor2D {
    let mut state = seed;
    Tensor2D::from_fn(rows, cols, precision, |_, _| uniform(&mut state)).unwrap()
}

/// Causal mask with a seeded sprinkle of invalid (padded) positions.
pub fn seeded_padded_mask(n: usize, seed: u64, causal: bool) -> MaskSpec {
    let mut state = seed;
    let valid: Vec<bool> = (0..n).map(|_| uniform(&mut state) > -0.6).collect();
    MaskSpec::new(n, causal, valid).unwrap()
}
