use thiserror::Error;

/// Errors surfaced by the public library API.
///
/// Internal model code panics on violated invariants it established itself;
/// `Error` is reserved for bad inputs crossing the API boundary.
#[derive(Debug, Error)]
pub enum Error {
    /// Tensor dimensions disagree with what the operation requires.
    #[error("shape error: {0}")]
    Shape(String),

    /// A configuration value is out of range or inconsistent.
    #[error("config error: {0}")]
    Config(String),

    /// An input value (token id, probability, variance, ...) is invalid.
    #[error("input error: {0}")]
    Input(String),

    /// A checkpoint file is malformed or inconsistent with its header.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn input(msg: impl Into<String>) -> Self {
        Error::Input(msg.into())
    }
}
