use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("group variant mismatch: expected {expected}, got {got}")]
    VariantMismatch {
        expected: &'static str,
        got: &'static str,
    },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("invalid dimensions: {0}")]
    InvalidDims(String),

    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    #[error("value {value} outside the kernel domain [-1, 1]")]
    OutOfDomain { value: f64 },

    #[error("operation not supported: {0}")]
    Unsupported(String),

    #[error("degenerate reference: representation norm {norm:e} is below 1e-12")]
    DegenerateReference { norm: f64 },

    #[error("need {needed} distinct non-zero patches, found {found}")]
    InsufficientPatches { needed: usize, found: usize },

    #[error("anchor Gram matrix is not positive semi-definite (eigenvalue {eigenvalue:e})")]
    NotPsd { eigenvalue: f64 },

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("malformed IDX file {path}: {reason}")]
    Idx { path: PathBuf, reason: String },

    #[error("malformed embedding file: {0}")]
    Embedding(String),

    #[error("config error at line {line}: {reason}")]
    Config { line: usize, reason: String },

    #[error("config: unknown key `{key}` in section [{section}]")]
    UnknownKey { section: String, key: String },

    #[error("config: missing required key `{key}` in section [{section}]")]
    MissingKey { section: String, key: String },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn param(name: &'static str, reason: impl Into<String>) -> Self {
        Error::InvalidParameter {
            name,
            reason: reason.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for filesystem failures.
    pub fn is_io(&self) -> bool {
        matches!(self, Error::Io { .. })
    }
}
