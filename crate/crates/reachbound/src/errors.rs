//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("matrix not symmetric: {0}")]
    NotSymmetric(String),

    #[error("matrix not positive definite: {0}")]
    NotPositiveDefinite(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("mixture weights invalid: {0}")]
    InvalidMixture(String),

    #[error("rejection sampling failed: {0}")]
    SamplingFailed(String),

    #[error("conic program rejected: {0}")]
    BadProgram(String),

    #[error("solver failed: status {status:?} ({detail})")]
    SolverFailure {
        status: crate::sdpsolver::SolveStatus,
        detail: String,
    },

    #[error("post-validation failed: {0}")]
    ValidationFailed(String),

    #[error("grid work cap exceeded: {0}")]
    GridCapExceeded(String),

    #[error("config invalid: {0}")]
    ConfigInvalid(String),

    #[error("file format error in {path}: {detail}")]
    Format { path: String, detail: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
