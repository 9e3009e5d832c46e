use thiserror::Error;

/// Errors raised by model construction, solvers and estimators.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum DsoError {
    #[error("invalid structure: {0}")]
    InvalidStructure(String),

    #[error("divergence undefined: {0}")]
    DivergenceUndefined(String),

    #[error("reachability: {0}")]
    Reachability(String),

    #[error("ergodicity: {0}")]
    Ergodicity(String),

    #[error("missing capability: {0}")]
    Capability(String),

    #[error("non-finite objective at probe point (coordinate {coordinate})")]
    Probe { coordinate: usize },

    #[error("stale batch: parameters differ from the batch snapshot")]
    Staleness,

    #[error("configuration: {0}")]
    Config(String),

    #[error("spectral solve did not converge after {0} iterations")]
    Spectral(usize),

    #[error("least-squares system is rank deficient; a positive ridge coefficient is required")]
    RegularizationRequired,

    #[error("linear solve failed: {0}")]
    Solve(String),

    /// Too many rollouts of a batch left the finite range.
    #[error("rollouts diverged: {0}")]
    Diverged(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),
}

pub type Result<T> = std::result::Result<T, DsoError>;

pub(crate) fn invalid<T>(msg: impl Into<String>) -> Result<T> {
    Err(DsoError::InvalidStructure(msg.into()))
}
