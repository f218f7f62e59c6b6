//! Dense matrices, Gram accumulation, factorizations, tensor lifts and sketches.

mod factor;
mod gram;
pub mod io;
mod khatri_rao;
mod matrix;
mod sketch;

pub use factor::{Factorization, FactorizationKind, GRAM_RCOND, SVD_RCOND};
pub use gram::GramState;
pub use khatri_rao::{khatri_rao_row_power, lift_matrix, lifted_dim, DEFAULT_LIFT_CAP};
pub use matrix::{dot, norm_sq, DenseMatrix};
pub use sketch::gaussian_sketch;
