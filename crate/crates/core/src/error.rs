use thiserror::Error;

/// Errors raised anywhere in the engine.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("quadrature failed to converge for {what} (estimate {estimate:e}, error {error:e})")]
    QuadratureFailure {
        what: &'static str,
        estimate: f64,
        error: f64,
    },

    #[error("covariance embedding failed: {0}")]
    CovarianceEmbedding(String),

    #[error("numerical blow-up at time step {n}, node {j}")]
    NumericalBlowup { n: usize, j: usize },

    #[error("insufficient data: need at least {needed}, got {got}")]
    InsufficientData { needed: usize, got: usize },

    #[error("sample has zero variance")]
    ZeroVariance,

    #[error("configuration error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}
