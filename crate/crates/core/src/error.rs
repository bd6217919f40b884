use thiserror::Error;

/// Errors raised by the VGPDS library.
#[derive(Debug, Error)]
pub enum VgpdsError {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("parameter out of domain: {0}")]
    ParameterDomain(String),

    #[error("unknown hyperparameter index {index} (kernel has {count})")]
    UnknownHyperparameter { index: usize, count: usize },

    #[error("matrix not positive definite after jitter retries: {0}")]
    NotPositiveDefinite(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("validation failed: {0}")]
    Validation(String),

    #[error("parse error at line {line}: {message}")]
    Parse { line: u64, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl VgpdsError {
    /// True for failures of the numerics rather than of the inputs.
    pub fn is_numerical(&self) -> bool {
        matches!(self, VgpdsError::NotPositiveDefinite(_) | VgpdsError::NonFinite(_))
    }
}

pub type Result<T> = std::result::Result<T, VgpdsError>;
