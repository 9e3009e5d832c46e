use dso_core::DsoError;

/// Failure classes of a run; each maps to one process exit code.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    /// Malformed config, out-of-range values, or a method the problem cannot run.
    #[error("config error: {0}")]
    Config(String),
    // the wrapped error prints as the next link of the `{:#}` chain
    #[error("runtime error")]
    Runtime(#[from] DsoError),
    #[error("i/o error")]
    Io(#[from] std::io::Error),
    /// A broken invariant of the runner itself.
    #[error("internal error: {0}")]
    Internal(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Config(_) | Self::Runtime(DsoError::Config(_)) | Self::Runtime(DsoError::Capability(_)) => 2,
            Self::Runtime(_) | Self::Io(_) | Self::Internal(_) => 3,
        }
    }
}

pub fn capability(msg: impl Into<String>) -> CliError {
    CliError::Config(msg.into())
}
