use super::matrix::DenseMatrix;
use crate::error::{Error, Result};

/// Default cap on `d^h` entries per lifted row.
pub const DEFAULT_LIFT_CAP: usize = 1 << 24;

/// Output length `dim^power`, or `None` on overflow or when it exceeds `cap`.
pub fn lifted_dim(dim: usize, power: usize, cap: usize) -> Result<usize> {
    let overflow = Error::LiftOverflow { dim, power, cap };
    let len = u32::try_from(power)
        .ok()
        .and_then(|p| dim.checked_pow(p))
        .ok_or(Error::LiftOverflow { dim, power, cap })?;
    if len > cap {
        return Err(overflow);
    }
    Ok(len)
}

/// Flattened `h`-fold tensor power `row ⊗ row ⊗ ... ⊗ row`, so that
/// `<lift(a), lift(b)> = <a, b>^h`.
pub fn khatri_rao_row_power(row: &[f64], half_p: usize, cap: usize) -> Result<Vec<f64>> {
    if half_p == 0 {
        return Err(Error::invalid("half_p", "must be at least 1"));
    }
    let len = lifted_dim(row.len(), half_p, cap)?;
    let mut out = Vec::with_capacity(len);
    out.extend_from_slice(row);
    for _ in 1..half_p {
        let prev = std::mem::take(&mut out);
        out.reserve(prev.len() * row.len());
        for &a in &prev {
            out.extend(row.iter().map(|&b| a * b));
        }
    }
    Ok(out)
}

/// Lifts every row of `k`.
pub fn lift_matrix(k: &DenseMatrix, half_p: usize, cap: usize) -> Result<DenseMatrix> {
    let cols = lifted_dim(k.cols(), half_p, cap)?;
    let mut data = Vec::with_capacity(k.rows() * cols);
    for row in k.iter_rows() {
        data.extend(khatri_rao_row_power(row, half_p, cap)?);
    }
    DenseMatrix::new(k.rows(), cols, data)
}
