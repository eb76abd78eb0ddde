use thiserror::Error;

/// Errors produced by the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("token {token} out of range for vocabulary of size {size}")]
    TokenOutOfRange { token: usize, size: usize },

    #[error("size mismatch: expected {expected}, got {actual}")]
    SizeMismatch { expected: usize, actual: usize },

    #[error("invalid distance matrix: {0}")]
    InvalidDistances(String),

    #[error("invalid pmf: {0}")]
    InvalidPmf(String),

    #[error("zero probability mass at token {0} with nonzero derivative")]
    ZeroMass(usize),

    #[error("no convergence: {0}")]
    NoConvergence(String),

    #[error("enumeration budget exceeded: {needed} states > {budget}")]
    BudgetExceeded { needed: u128, budget: u128 },

    #[error("posterior unavailable: {0}")]
    Posterior(String),

    #[error("undefined: {0}")]
    Undefined(String),

    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}

pub(crate) fn ensure_finite(name: &str, value: f64) -> Result<()> {
    if value.is_finite() {
        Ok(())
    } else {
        Err(invalid(format!("{name} must be finite, got {value}")))
    }
}
