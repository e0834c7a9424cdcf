use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("matrix is singular or ill-conditioned (condition estimate {cond:.3e}, guard {guard:.1e}){hint}")]
    IllConditioned {
        cond: f64,
        guard: f64,
        hint: String,
    },

    #[error("matrix for the quadratic objective is not positive definite")]
    IndefiniteMatrix,

    #[error("no convergence within {cap} iterations (residual {residual:.3e})")]
    NoConvergence { cap: usize, residual: f64 },

    #[error("divergence detected: {0}")]
    Divergence(String),

    #[error("non-finite loss at step {step}: {value}")]
    NonFiniteLoss { step: usize, value: f64 },

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Serde(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
