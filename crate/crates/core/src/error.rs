use std::path::PathBuf;

/// Errors surfaced by every module in this crate.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Tensor or grid extents do not line up for the requested operation.
    #[error("shape error: {0}")]
    Shape(String),
    /// A configuration value is out of range or inconsistent.
    #[error("config error: {0}")]
    Config(String),
    /// An operation was invoked in a state that cannot support it.
    #[error("state error: {0}")]
    State(String),
    /// File-level failure; always names the offending path.
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn state(msg: impl Into<String>) -> Self {
        Error::State(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    /// Data-level corruption in a file (truncation, bad magic, ...).
    pub fn corrupt(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        Error::Io {
            path: path.into(),
            source: std::io::Error::new(std::io::ErrorKind::InvalidData, msg.into()),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
