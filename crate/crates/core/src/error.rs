use std::path::PathBuf;

/// Errors produced anywhere in the fusion pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("configuration error at `{path}`: {msg}")]
    Config { path: String, msg: String },

    #[error("numeric domain error: {0}")]
    NumericDomain(String),

    #[error("parse error ({field}): {msg}")]
    Parse { field: String, msg: String },

    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error("manifest entry {index}: {msg}")]
    Manifest { index: usize, msg: String },

    #[error("training diverged at step {step}: t={t} loss={loss} grad_norm={grad_norm}")]
    Diverged {
        step: u64,
        t: usize,
        loss: f64,
        grad_norm: f64,
    },

    #[error("I/O error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error in {}: {source}", path.display())]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn config(path: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Config {
            path: path.into(),
            msg: msg.into(),
        }
    }

    pub(crate) fn parse(field: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Parse {
            field: field.into(),
            msg: msg.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn json(path: impl Into<PathBuf>, source: serde_json::Error) -> Self {
        Error::Json {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
