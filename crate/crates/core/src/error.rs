//! Crate-wide error type.

use thiserror::Error;

/// Errors produced by the detection stack.
#[derive(Debug, Error)]
pub enum Error {
    /// A tensor or kernel dimension does not line up. The message names the
    /// operation and the offending axis.
    #[error("{op}: {detail}")]
    Shape { op: &'static str, detail: String },

    /// Invalid configuration value or config file contents.
    #[error("config error: {0}")]
    Config(String),

    /// An optimizer step found a parameter without an accumulated gradient.
    #[error("parameter `{0}` has no gradient")]
    MissingGrad(String),

    /// A non-finite value showed up during training.
    #[error("non-finite value in tensor `{0}`")]
    NonFinite(String),

    /// Checkpoint file is malformed or incompatible with the model.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    /// A self-verification suite (gradient checks, oracle comparisons)
    /// found a mismatch.
    #[error("verification failed: {0}")]
    Verification(String),

    /// Underlying I/O failure.
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
