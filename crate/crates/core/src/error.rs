use thiserror::Error;

/// Errors raised across the crate.
///
/// The variants map onto the harness exit codes: configuration problems are
/// reported as exit code 2, numerical convergence problems as exit code 3.
#[derive(Debug, Error)]
pub enum Error {
    #[error("point {x} lies outside the map domain [{lo}, {hi}]")]
    Domain { x: f64, lo: f64, hi: f64 },

    #[error("invalid configuration for `{field}`: {reason}")]
    Config { field: String, reason: String },

    #[error("{what} did not converge after {iterations} iterations (residual {residual:e})")]
    Convergence {
        what: String,
        iterations: usize,
        residual: f64,
    },

    #[error("series truncation not decayed: |P^(K+1) phi'| = {residual:e} exceeds {tolerance:e}; increase K")]
    SeriesNotDecayed { residual: f64, tolerance: f64 },

    #[error("observable is not centered: mean {mean:e} exceeds tolerance {tolerance:e}")]
    NotCentered { mean: f64, tolerance: f64 },

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("mismatched inputs: {0}")]
    Mismatch(String),

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            reason: reason.into(),
        }
    }

    /// Process exit code used by the `homog` binary.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config { .. }
            | Error::Domain { .. }
            | Error::Mismatch(_)
            | Error::Unsupported(_)
            | Error::Degenerate(_)
            | Error::NotCentered { .. } => 2,
            Error::Convergence { .. } | Error::SeriesNotDecayed { .. } => 3,
            Error::Io(_) | Error::Json(_) => 1,
        }
    }
}
