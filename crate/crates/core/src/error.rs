use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("training diverged at step {step}: {detail}")]
    Divergence { step: u64, detail: String },

    #[error("{failed} gradient checks out of tolerance")]
    GradientCheck { failed: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid argument: {0}")]
    Invalid(String),

    #[error("malformed {what}: {detail}")]
    Format { what: String, detail: String },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: io::Error,
    },

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub fn io(path: impl AsRef<std::path::Path>, source: io::Error) -> Self {
        Error::Io { path: path.as_ref().display().to_string(), source }
    }

    /// Process exit code used by the command-line front-end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::NonFinite { .. } | Error::Divergence { .. } | Error::GradientCheck { .. } => 2,
            Error::Io { .. } | Error::Csv(_) | Error::Format { .. } => 3,
            Error::Shape(_) | Error::Config(_) | Error::Invalid(_) | Error::Json(_) => 1,
        }
    }
}
