use std::path::PathBuf;

use thiserror::Error;

/// Errors raised across the front-end, network, and training harness.
#[derive(Debug, Error)]
pub enum PcqError {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("missing precomputed embedding: {}", .0.display())]
    MissingEmbedding(PathBuf),

    #[error("gradient check failed: {0}")]
    CheckFailed(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("i/o error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, PcqError>;

impl PcqError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        PcqError::Io {
            path: path.into(),
            source,
        }
    }
}

macro_rules! shape_err {
    ($($arg:tt)*) => { $crate::error::PcqError::Shape(format!($($arg)*)) };
}
pub(crate) use shape_err;
