// SPDX-License-Identifier: MIT OR Apache-2.0

use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{0}")]
    Format(String),
    #[error("{0}")]
    Config(String),
    #[error(transparent)]
    Core(#[from] conceptdrive_core::Error),
    /// An experiment's own consistency check failed.
    #[error("assertion failed: {0}")]
    Assertion(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    /// Process exit code: 1 for failed experiment assertions, 2 for
    /// configuration, input and IO problems.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Assertion(_) => 1,
            Error::Core(conceptdrive_core::Error::Training(_)) => 1,
            _ => 2,
        }
    }
}

macro_rules! format_err {
    ($($arg:tt)*) => { $crate::error::Error::Format(format!($($arg)*)) };
}
pub(crate) use format_err;
