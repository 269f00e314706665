//! Seeded random fixtures for the CLI and verification suites.
//!
//! The generator is pinned so alternate implementations can reproduce every
//! fixture: a ChaCha8 stream cipher RNG (`rand_chacha::ChaCha8Rng`) seeded
//! with the run seed, drawn as `f64` uniform in `[-1, 1)` via
//! `2 * next_f64() - 1`, filling tensors row-major in the fixed order
//! teacher-X, teacher-Y, student-X, student-Y.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::tensor::{Precision, Tensor2D};

/// One uniform draw in `[-1, 1)`.
pub fn draw(rng: &mut ChaCha8Rng) -> f64 {
    2.0 * rng.gen::<f64>() - 1.0
}

pub fn rng_from_seed(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// A single seeded tensor, filled row-major.
pub fn random_tensor(
    rng: &mut ChaCha8Rng,
    rows: usize,
    cols: usize,
    precision: Precision,
) -> Result<Tensor2D> {
    Tensor2D::from_fn(rows, cols, precision, |_, _| draw(rng))
}

/// The four kernel inputs in the documented draw order.
pub fn random_input_set(
    seed: u64,
    n: usize,
    d: usize,
    precision: Precision,
) -> Result<[Tensor2D; 4]> {
    let mut rng = rng_from_seed(seed);
    let xt = random_tensor(&mut rng, n, d, precision)?;
    let yt = random_tensor(&mut rng, n, d, precision)?;
    let xs = random_tensor(&mut rng, n, d, precision)?;
    let ys = random_tensor(&mut rng, n, d, precision)?;
    Ok([xt, yt, xs, ys])
}
