//! Error type shared across the crate.

use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Tensor shape or argument contract violated.
    #[error("{op}: {msg}")]
    Shape { op: &'static str, msg: String },

    /// Invalid configuration or argument value.
    #[error("invalid argument: {0}")]
    InvalidArg(String),

    /// A forward op produced NaN or Inf. `scope` names the layer path.
    #[error("non-finite value produced by `{op}` at `{scope}`")]
    NonFinite { op: &'static str, scope: String },

    /// Numeric failure during training (divergence, bad loss).
    #[error("numeric failure: {0}")]
    Numeric(String),

    /// File I/O with path context.
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// Malformed file contents (config, checkpoint, PGM, dataset).
    #[error("format error in {path}: {msg}")]
    Format { path: PathBuf, msg: String },
}

impl Error {
    pub fn shape(op: &'static str, msg: impl Into<String>) -> Self {
        Error::Shape { op, msg: msg.into() }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub fn format(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        Error::Format { path: path.into(), msg: msg.into() }
    }

    /// Process exit code the CLI maps this error to.
    /// 2 = usage, 3 = data, 4 = numeric.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::InvalidArg(_) => 2,
            Error::Io { .. } | Error::Format { .. } => 3,
            Error::NonFinite { .. } | Error::Numeric(_) => 4,
            Error::Shape { .. } => 2,
        }
    }
}
