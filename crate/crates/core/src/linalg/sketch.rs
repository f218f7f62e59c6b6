use super::matrix::DenseMatrix;
use crate::error::{Error, Result};
use crate::seed::rng_from;

/// `m x n` matrix of i.i.d. `N(0, 1/m)` entries. Applied as `S x` for
/// `x` in `R^n`, it preserves `||x||^2` in expectation; the draw is fixed by `seed`.
pub fn gaussian_sketch(m: usize, n: usize, seed: u64) -> Result<DenseMatrix> {
    if m == 0 || n == 0 {
        return Err(Error::invalid("sketch size", "m and n must be at least 1"));
    }
    let mut rng = rng_from(seed);
    Ok(DenseMatrix::gaussian(
        m,
        n,
        1.0 / (m as f64).sqrt(),
        &mut rng,
    ))
}
