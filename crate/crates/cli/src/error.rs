use std::path::{Path, PathBuf};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("usage error: {0}")]
    Usage(String),
    #[error("validation error: {0}")]
    Validation(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },
}

impl CliError {
    /// 0 success, 1 usage, 2 validation (including unreadable inputs),
    /// 3 numerical failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Usage(_) => 1,
            Self::Validation(_) | Self::Io { .. } => 2,
            Self::Numerical(_) => 3,
        }
    }

    pub fn io(path: &Path, source: std::io::Error) -> Self {
        Self::Io { path: path.to_path_buf(), source }
    }
}

impl From<cmmp_core::Error> for CliError {
    fn from(e: cmmp_core::Error) -> Self {
        match e {
            cmmp_core::Error::Config(m) => Self::Usage(m),
            cmmp_core::Error::Numerical(m) => Self::Numerical(m),
            other => Self::Validation(other.to_string()),
        }
    }
}

pub type Result<T, E = CliError> = std::result::Result<T, E>;

macro_rules! validation {
    ($($arg:tt)*) => { $crate::error::CliError::Validation(format!($($arg)*)) };
}
macro_rules! usage {
    ($($arg:tt)*) => { $crate::error::CliError::Usage(format!($($arg)*)) };
}
pub(crate) use {usage, validation};
