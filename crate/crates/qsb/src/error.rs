//! Error type of the std companion crate.

use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum QsbError {
    #[error(transparent)]
    Core(#[from] qsb_core::Error),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("CSV: {0}")]
    Csv(#[from] csv::Error),
    #[error("JSON: {0}")]
    Json(#[from] serde_json::Error),
    #[error("config: {0}")]
    Config(String),
    #[error("format: {0}")]
    Format(String),
}

pub type Result<T> = std::result::Result<T, QsbError>;

impl QsbError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        QsbError::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(msg: impl Into<String>) -> Self {
        QsbError::Format(msg.into())
    }
}
