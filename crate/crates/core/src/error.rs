use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid hyperparameter or experiment setting.
    #[error("configuration error: {0}")]
    Config(String),

    /// Gate, circuit or parameter vector that does not fit together.
    #[error("structural error: {0}")]
    Structural(String),

    /// Tensor or vector with the wrong size.
    #[error("shape error: {0}")]
    Shape(String),

    /// Input whose norm is too small to be amplitude encoded.
    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    /// Index outside its admissible range (labels, basis states).
    #[error("range error: {0}")]
    Range(String),

    /// A component used before it was fitted.
    #[error("state error: {0}")]
    State(String),

    #[error("format error in {path}: {message} (byte offset {offset})")]
    Format {
        path: PathBuf,
        offset: u64,
        message: String,
    },

    /// Teacher logits table that does not cover every requested sample.
    #[error("teacher logits missing for {} sample(s): {missing:?}", missing.len())]
    Coverage { missing: Vec<usize> },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(
        path: impl Into<PathBuf>,
        offset: u64,
        message: impl Into<String>,
    ) -> Self {
        Error::Format {
            path: path.into(),
            offset,
            message: message.into(),
        }
    }
}
