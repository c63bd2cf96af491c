use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("empty input: {0}")]
    EmptyInput(String),
    #[error("not found: {0}")]
    NotFound(String),
    #[error("i/o error on {path}: {message}")]
    Io { path: PathBuf, message: String },
    #[error("failed to place shapes for video {video_index} after {attempts} attempts")]
    Generation { video_index: usize, attempts: usize },
    #[error("out-of-vocabulary word {0:?}")]
    OutOfVocabulary(String),
    #[error("token id {0} is out of range")]
    IdOutOfRange(u32),
    #[error("format error: {0}")]
    Format(String),
    #[error("sequence length {len} exceeds the maximum of {max}")]
    Length { len: usize, max: usize },
    #[error("no <TRK> token in the sequence")]
    MissingTrkToken,
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("non-finite loss at iteration {iteration}: {detail}")]
    NonFiniteLoss { iteration: usize, detail: String },
    #[error("incompatible checkpoint: {0}")]
    Compatibility(String),
    #[error(transparent)]
    Candle(#[from] candle_core::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, err: impl std::fmt::Display) -> Self {
        Error::Io {
            path: path.into(),
            message: err.to_string(),
        }
    }

    /// Process exit status used by the command line tool.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Argument(_) | Error::Compatibility(_) => 2,
            Error::NotFound(_)
            | Error::Io { .. }
            | Error::Generation { .. }
            | Error::OutOfVocabulary(_)
            | Error::Format(_)
            | Error::Json(_) => 3,
            Error::Numeric(_) | Error::NonFiniteLoss { .. } => 4,
            _ => 1,
        }
    }
}
