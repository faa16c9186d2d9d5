use thiserror::Error;

#[derive(Debug, Error)]
pub enum KvnnError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("integer overflow: {0}")]
    Overflow(String),

    #[error("singular system: {0}")]
    Singular(String),

    #[error("ill-conditioned fit: {0}")]
    IllConditioned(String),

    #[error("eigensolver did not converge: {0}")]
    EigenFailure(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("training diverged: {0}")]
    Diverged(String),

    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl KvnnError {
    /// Stable machine-readable tag used by the CLI's JSON error objects.
    pub fn kind(&self) -> &'static str {
        match self {
            KvnnError::DimensionMismatch { .. } => "dimension_mismatch",
            KvnnError::InvalidArgument(_) => "invalid_argument",
            KvnnError::Overflow(_) => "overflow",
            KvnnError::Singular(_) => "singular",
            KvnnError::IllConditioned(_) => "ill_conditioned",
            KvnnError::EigenFailure(_) => "eigen_failure",
            KvnnError::NonFinite(_) => "non_finite",
            KvnnError::Diverged(_) => "diverged",
            KvnnError::Format(_) => "format",
            KvnnError::Io(_) => "io",
            KvnnError::Json(_) => "json",
        }
    }
}

pub type Result<T> = std::result::Result<T, KvnnError>;

pub(crate) fn check_dim(expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(KvnnError::DimensionMismatch { expected, got })
    }
}

/// `fs::read_to_string` with the path in the error message.
pub(crate) fn read_to_string(path: &std::path::Path) -> Result<String> {
    std::fs::read_to_string(path)
        .map_err(|e| KvnnError::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))
}
