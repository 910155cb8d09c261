use std::path::PathBuf;

use crate::losses::LossReport;

/// Errors raised anywhere in the editing pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch: {context}: expected {expected}, got {actual}")]
    Shape {
        context: &'static str,
        expected: String,
        actual: String,
    },

    #[error("invalid input: {0}")]
    Input(String),

    #[error("invalid configuration at `{path}`: {message}")]
    Config { path: String, message: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image codec error on {path}: {message}")]
    Codec { path: PathBuf, message: String },

    #[error("backend error: {0}")]
    Backend(String),

    #[error("unsupported capability: {0}")]
    Unsupported(String),

    #[error("checkpoint {path}: {message}")]
    Checkpoint { path: PathBuf, message: String },

    #[error("checkpoint config mismatch: stored {stored}, expected {expected}")]
    ConfigMismatch { stored: String, expected: String },

    #[error("atlas package {file}: {message}")]
    Package { file: PathBuf, message: String },

    #[error("non-finite loss at step {step}: {report}")]
    NonFinite { step: usize, report: Box<LossReport> },

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),
}

impl Error {
    /// Process exit code: 1 configuration, 2 I/O, 3 training, 4 backend.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config { .. } | Error::ConfigMismatch { .. } | Error::Input(_) => 1,
            Error::Io { .. } | Error::Codec { .. } | Error::Package { .. } | Error::Checkpoint { .. } => 2,
            Error::Shape { .. } | Error::NonFinite { .. } | Error::Tensor(_) => 3,
            Error::Backend(_) | Error::Unsupported(_) => 4,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn shape(
        context: &'static str,
        expected: impl std::fmt::Debug,
        actual: impl std::fmt::Debug,
    ) -> Self {
        Error::Shape {
            context,
            expected: format!("{expected:?}"),
            actual: format!("{actual:?}"),
        }
    }

    pub(crate) fn config(path: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            path: path.into(),
            message: message.into(),
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
