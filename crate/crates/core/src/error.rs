use std::path::PathBuf;

use thiserror::Error;

/// Errors surfaced by the engine and the experiment harness.
#[derive(Debug, Error)]
pub enum LeopardError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid state: {0}")]
    InvalidState(String),

    #[error("numeric failure: {0}")]
    NumericFailure(String),

    #[error("parse error at row {row}, column {column}: {message}")]
    Parse {
        row: usize,
        column: String,
        message: String,
    },

    #[error("config error: {0}")]
    Config(String),

    #[error("io error on {path:?}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl LeopardError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        LeopardError::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, LeopardError>;

macro_rules! invalid_arg {
    ($($arg:tt)*) => {
        $crate::error::LeopardError::InvalidArgument(format!($($arg)*))
    };
}
pub(crate) use invalid_arg;
