use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("corpus corruption in {path}: {reason}")]
    CorpusCorruption { path: PathBuf, reason: String },

    #[error("not found: {0}")]
    NotFound(String),

    #[error("refusing to overwrite existing path {0} (pass force to replace it)")]
    AlreadyExists(PathBuf),

    #[error("config error: {0}")]
    Config(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("training diverged at step {step}: {term} is not finite")]
    Divergence { step: usize, term: String },

    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("tensor backend: {0}")]
    Backend(#[from] candle_core::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("image: {0}")]
    Image(#[from] image::ImageError),

    #[error("wav: {0}")]
    Wav(#[from] hound::Error),
}

impl Error {
    /// Short, stable category string used in machine-readable error lines.
    pub fn category(&self) -> &'static str {
        match self {
            Error::Shape(_) => "shape",
            Error::InvalidInput(_) => "invalid-input",
            Error::CorpusCorruption { .. } => "corpus-corruption",
            Error::NotFound(_) => "not-found",
            Error::AlreadyExists(_) => "already-exists",
            Error::Config(_) => "config",
            Error::Checkpoint(_) => "checkpoint",
            Error::Divergence { .. } => "divergence",
            Error::Io { .. } => "io",
            Error::Backend(_) => "backend",
            Error::Json(_) => "json",
            Error::Image(_) => "image",
            Error::Wav(_) => "wav",
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn corrupt(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::CorpusCorruption {
            path: path.into(),
            reason: reason.into(),
        }
    }
}

macro_rules! shape_err {
    ($($arg:tt)*) => { $crate::error::Error::Shape(format!($($arg)*)) };
}
macro_rules! invalid {
    ($($arg:tt)*) => { $crate::error::Error::InvalidInput(format!($($arg)*)) };
}
pub(crate) use invalid;
pub(crate) use shape_err;
