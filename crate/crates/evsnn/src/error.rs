use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    /// Malformed file content; `at` is a line number or byte offset description.
    #[error("{path}: {at}: {msg}")]
    Format { path: PathBuf, at: String, msg: String },
    #[error("config: {0}")]
    Config(String),
    #[error(transparent)]
    Core(#[from] evsnn_core::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub fn format(path: impl Into<PathBuf>, at: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Format { path: path.into(), at: at.into(), msg: msg.into() }
    }

    /// Process exit code: 2 config/usage, 3 I/O or file content, 4 numerical failure.
    pub fn exit_code(&self) -> i32 {
        use evsnn_core::Error as C;
        match self {
            Error::Io { .. } | Error::Format { .. } => 3,
            Error::Config(_) => 2,
            Error::Core(C::NonFinite(_)) => 4,
            Error::Core(C::InvalidInput(_)) => 3,
            Error::Core(_) => 2,
        }
    }
}
