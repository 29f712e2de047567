use std::path::PathBuf;
use thiserror::Error;

/// Crate-wide error type. Variants map onto the failure classes the
/// pipeline distinguishes at its boundaries (config validation, file
/// formats, numeric-domain violations, internal contract breaks).
#[derive(Debug, Error)]
pub enum MvccError {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("i/o error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("format error at byte {offset}: {msg}")]
    Format { offset: usize, msg: String },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("checkpoint mismatch: {}", .mismatches.join(", "))]
    CheckpointMismatch { mismatches: Vec<String> },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, MvccError>;

impl MvccError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        MvccError::Io {
            path: path.into(),
            source,
        }
    }
}
