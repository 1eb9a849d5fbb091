use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = OdgError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum OdgError {
    #[error("invalid configuration: {field}: {reason}")]
    Config { field: String, reason: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("index {index:?} out of range for grid dims {dims:?}")]
    IndexOutOfRange { index: [usize; 3], dims: [usize; 3] },

    #[error("grid geometry mismatch: {0}")]
    GeometryMismatch(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("{path}: {reason}")]
    Data { path: PathBuf, reason: String },

    #[error("unsupported format version {found} in {path} (expected {expected})")]
    Version {
        path: PathBuf,
        found: u32,
        expected: u32,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("loss diverged at step {step}: {value}")]
    Divergence { step: usize, value: f64 },
}

impl OdgError {
    pub fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        OdgError::Config {
            field: field.into(),
            reason: reason.into(),
        }
    }

    pub fn data(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        OdgError::Data {
            path: path.into(),
            reason: reason.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        OdgError::Io {
            path: path.into(),
            source,
        }
    }
}
