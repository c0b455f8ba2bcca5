use thiserror::Error;

/// Errors surfaced by models, the sampler and the analysis pipeline.
#[derive(Debug, Error)]
pub enum Error {
    /// Invalid configuration (bad sampler parameters, unbounded space, ...).
    #[error("configuration error: {0}")]
    Config(String),

    /// An energy/gradient evaluation produced a non-finite or undefined value.
    #[error("evaluation error: {0}")]
    Evaluation(String),

    /// The operation is not defined for this model kind.
    #[error("unsupported operation: {0}")]
    Unsupported(String),

    /// Gradient/coordinate descent did not converge within the iteration cap.
    #[error("descent did not converge within {0} iterations")]
    DescentNonConvergence(usize),

    /// Points from different models were mixed.
    #[error("model mismatch: {0}")]
    ModelMismatch(String),

    /// An input collection that must be non-empty was empty.
    #[error("empty input: {0}")]
    Empty(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn evaluation(msg: impl Into<String>) -> Self {
        Error::Evaluation(msg.into())
    }

    pub fn unsupported(msg: impl Into<String>) -> Self {
        Error::Unsupported(msg.into())
    }
}
