use neural_pca::Error;

/// Failure of a command. Each variant maps to a fixed exit code.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    /// Bad configuration or arguments; exit code 2.
    #[error("{0}")]
    Config(String),
    /// Unreadable or inconsistent checkpoint; exit code 3.
    #[error("{0}")]
    Checkpoint(String),
    /// Training or evaluation hit non-finite values; exit code 4.
    #[error("{0}")]
    Numerical(String),
    #[error("{0}")]
    Other(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Checkpoint(_) => 3,
            CliError::Numerical(_) => 4,
            CliError::Other(_) => 1,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Config(_) => "config",
            CliError::Checkpoint(_) => "checkpoint",
            CliError::Numerical(_) => "numerical",
            CliError::Other(_) => "error",
        }
    }

    /// `npca: <kind>: <message>` with newlines flattened.
    pub fn line(&self) -> String {
        let msg = self.to_string().replace(['\n', '\r'], " ");
        format!("npca: {}: {msg}", self.kind())
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match e {
            Error::NonFinite(_) | Error::Aborted(_) | Error::Decomposition(_) | Error::Degenerate(_) => {
                CliError::Numerical(e.to_string())
            }
            Error::UnknownVariant(_)
            | Error::InvalidArgument(_)
            | Error::InsufficientBatch(_)
            | Error::Format(_) => CliError::Config(e.to_string()),
            Error::Shape(_) | Error::Usage(_) | Error::Io(_) => CliError::Other(e.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Other(format!("io: {e}"))
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        CliError::Other(format!("csv: {e}"))
    }
}
