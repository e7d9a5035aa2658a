use thiserror::Error;

/// Errors produced by the numeric core.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("decomposition failed: {0}")]
    Decomposition(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("usage error: {0}")]
    Usage(String),

    #[error("insufficient batch: {0}")]
    InsufficientBatch(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("unknown variant `{0}`")]
    UnknownVariant(String),

    #[error("data format error: {0}")]
    Format(String),

    #[error("training aborted: {0}")]
    Aborted(String),

    #[error("io error: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
