use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, CroftError>;

#[derive(Debug, Error)]
pub enum CroftError {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("format error: {0}")]
    Format(String),

    #[error("truncated payload: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },

    #[error("data error: {0}")]
    Data(String),

    #[error("validation error: {0}")]
    Validation(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: i64, classes: usize },

    #[error("divergence in {term}: {detail}")]
    Divergence { term: String, detail: String },

    #[error("non-finite evaluation: {0}")]
    NonFinite(String),

    #[error("instance too large: {0}")]
    TooLarge(String),

    #[error("manifest error: {0}")]
    Manifest(#[from] serde_json::Error),
}

impl CroftError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CroftError::Io {
            path: path.into(),
            source,
        }
    }

    /// Whether the error comes from numerics (divergence, tolerance, non-finite values)
    /// rather than from inputs or configuration.
    pub fn is_numerical(&self) -> bool {
        matches!(self, CroftError::Divergence { .. } | CroftError::NonFinite(_))
    }
}
