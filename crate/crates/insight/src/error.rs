//! Application errors mapped onto process exit codes.

use insight_core::CoreError;
use std::path::PathBuf;
use thiserror::Error;

/// Exit codes: 0 success, 2 usage/config, 3 data/format, 4 numerical.
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_NUMERIC: i32 = 4;

#[derive(Debug, Error)]
pub enum AppError {
    #[error("configuration error: {0}")]
    Usage(String),

    #[error("{path}: {message} (byte offset {offset})")]
    Format { path: PathBuf, offset: u64, message: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("data error: {0}")]
    Data(String),

    #[error("numerical failure: {0}")]
    Numeric(String),
}

impl AppError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        AppError::Io { path: path.into(), source }
    }

    pub fn format(path: impl Into<PathBuf>, offset: u64, message: impl Into<String>) -> Self {
        AppError::Format { path: path.into(), offset, message: message.into() }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            AppError::Usage(_) => EXIT_USAGE,
            AppError::Format { .. } | AppError::Io { .. } | AppError::Data(_) => EXIT_DATA,
            AppError::Numeric(_) => EXIT_NUMERIC,
        }
    }
}

impl From<CoreError> for AppError {
    fn from(e: CoreError) -> Self {
        match &e {
            CoreError::Config(_) | CoreError::Argument(_) => AppError::Usage(e.to_string()),
            CoreError::NonFinite(_) | CoreError::Training { .. } | CoreError::Oracle(_) => {
                AppError::Numeric(e.to_string())
            }
            _ => AppError::Data(e.to_string()),
        }
    }
}

pub type Result<T> = std::result::Result<T, AppError>;
