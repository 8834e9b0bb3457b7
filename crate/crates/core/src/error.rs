use std::io;
use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("state error: {0}")]
    State(String),

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("checkpoint format error: {0}")]
    Format(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("training diverged at step {step}: non-finite values in `{layer}`")]
    Divergence { layer: String, step: u64 },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn data(msg: impl Into<String>) -> Self {
        Error::Data(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Argument(_) => 2,
            Error::Data(_) | Error::Protocol(_) | Error::Shape(_) | Error::Precondition(_) => 3,
            Error::Divergence { .. } => 4,
            Error::Io { .. } | Error::Format(_) | Error::State(_) => 5,
        }
    }
}
