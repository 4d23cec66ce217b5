use thiserror::Error;

/// Failure of a command, carrying its process exit code.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Core(#[from] relmap_core::Error),
    #[error("oracle {endpoint}: {message}")]
    Oracle { endpoint: String, message: String },
    #[error("internal invariant violated: {0}")]
    Internal(String),
}

impl CliError {
    pub fn usage(msg: impl Into<String>) -> Self {
        CliError::Usage(msg.into())
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Core(relmap_core::Error::Oracle { .. }) | CliError::Oracle { .. } => 3,
            CliError::Core(_) => 2,
            CliError::Internal(_) => 4,
        }
    }
}
