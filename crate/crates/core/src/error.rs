use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("weights format error for layer `{layer}`: {message}")]
    Format { layer: String, message: String },

    #[error("graph error: {0}")]
    Graph(String),

    #[error("dependency error: {0}")]
    Dependency(String),

    #[error("non-finite value encountered: {0}")]
    NonFinite(String),

    #[error("trainer failed at trial {trial}: {message}")]
    Trainer { trial: usize, message: String },

    #[error("search aborted at trial {trial}: {source}")]
    Search {
        trial: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn format(layer: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Format {
            layer: layer.into(),
            message: message.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
