use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    #[error("non-finite entry at ({row}, {col})")]
    NonFinite { row: usize, col: usize },

    #[error("Khatri-Rao lift {dim}^{power} exceeds the cap of {cap} entries per row")]
    LiftOverflow {
        dim: usize,
        power: usize,
        cap: usize,
    },

    #[error("dense attention of size {rows}x{cols} exceeds the cap of {cap} rows")]
    SizeCap {
        rows: usize,
        cols: usize,
        cap: usize,
    },

    #[error("Lewis weights did not converge in {iterations} iterations (residual {residual:e})")]
    NoConvergence { iterations: usize, residual: f64 },

    #[error("stream length changed between passes: {first} rows then {second} rows")]
    StreamLengthMismatch { first: usize, second: usize },

    #[error(
        "planted instance fails separation check {check} (1: within S, 2: across S) \
         after {attempts} attempts: pair ({row_a}, {row_b}) has normalized correlation {ratio:.4} > {bound}"
    )]
    PlantedVerification {
        check: u8,
        attempts: usize,
        row_a: usize,
        row_b: usize,
        ratio: f64,
        bound: f64,
    },

    #[error("malformed input: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Process exit code: 2 validation, 3 numeric, 4 I/O or malformed input.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::DimensionMismatch { .. }
            | Error::InvalidParameter { .. }
            | Error::LiftOverflow { .. }
            | Error::SizeCap { .. } => 2,
            Error::NoConvergence { .. } | Error::PlantedVerification { .. } => 3,
            Error::NonFinite { .. }
            | Error::StreamLengthMismatch { .. }
            | Error::Format(_)
            | Error::Io(_) => 4,
        }
    }

    pub(crate) fn invalid(name: &'static str, reason: impl Into<String>) -> Self {
        Error::InvalidParameter {
            name,
            reason: reason.into(),
        }
    }

    pub(crate) fn dim(context: &'static str, expected: usize, got: usize) -> Self {
        Error::DimensionMismatch {
            context,
            expected,
            got,
        }
    }
}
