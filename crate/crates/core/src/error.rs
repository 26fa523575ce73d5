use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Declared shape and actual data disagree.
    #[error("structural error: {0}")]
    Structural(String),

    /// Value outside the domain of an operation.
    #[error("domain error: {0}")]
    Domain(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("attention file {path}: {reason}")]
    AttentionFormat { path: PathBuf, reason: String },

    #[error("scene generation failed: {0}")]
    Generation(String),

    #[error("detector backend: {0}")]
    Backend(String),

    #[error("detector does not support {0}")]
    Capability(&'static str),

    #[error("detector request {id} timed out after {secs} s")]
    Timeout { id: u64, secs: u64 },

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },

    #[error("{context}: {source}")]
    Json {
        context: String,
        #[source]
        source: serde_json::Error,
    },
}

impl Error {
    pub(crate) fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io { context: context.into(), source }
    }

    pub(crate) fn json(context: impl Into<String>, source: serde_json::Error) -> Self {
        Error::Json { context: context.into(), source }
    }
}
