use thiserror::Error;

/// Errors raised by the estimation, policy and harness layers.
#[derive(Debug, Error)]
pub enum Error {
    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("index {index} out of range for length {len}")]
    OutOfRange { index: usize, len: usize },

    #[error("nonpositive predictive variance {0:e}")]
    NonpositiveVariance(f64),

    #[error("singular precision matrix in posterior fusion")]
    SingularPrecision,

    #[error("singular matrix: {0}")]
    Singular(&'static str),

    #[error("solver did not converge after {iterations} iterations (kkt residual {residual:e})")]
    NonConvergence { iterations: usize, residual: f64 },

    #[error("unknown test function `{0}`")]
    UnknownFunction(String),

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn dim(msg: impl Into<String>) -> Error {
    Error::Dimension(msg.into())
}

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}
