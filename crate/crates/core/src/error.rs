use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Malformed or out-of-range caller input.
    #[error("invalid input: {0}")]
    Input(String),

    /// A configuration value cannot be satisfied.
    #[error("configuration error: {0}")]
    Config(String),

    /// The operation was called on an object in the wrong state.
    #[error("state error: {0}")]
    State(String),

    /// Feature extractor or diffusion backend failed.
    #[error("backend error: {0}")]
    Backend(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    /// Invariant violated inside the library (e.g. prompt and attention columns disagree).
    #[error("internal error: {0}")]
    Internal(String),

    #[error("unsupported schema version {found} in {what} (expected {expected})")]
    Schema {
        what: &'static str,
        found: u32,
        expected: u32,
    },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

macro_rules! input_err {
    ($($arg:tt)*) => { $crate::error::Error::Input(format!($($arg)*)) };
}
pub(crate) use input_err;
