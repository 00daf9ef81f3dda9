//! Crate-wide error type. Binaries wrap this in `anyhow` for reporting; the
//! library keeps a typed enum so callers can branch on failure class.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("image error: {0}")]
    Image(String),

    #[error("trigger embedding failed: {0}")]
    Trigger(String),

    #[error("response rewrite failed: {0}")]
    Rewrite(String),

    #[error("external service call failed: {0}")]
    Service(String),

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("model error: {0}")]
    Model(String),

    #[error("tuning failed: {0}")]
    Tune(String),

    #[error("evaluation failed: {0}")]
    Eval(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("serialization error: {0}")]
    Serde(String),
}

impl Error {
    /// Attach a path to a raw io error.
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Serde(e.to_string())
    }
}
