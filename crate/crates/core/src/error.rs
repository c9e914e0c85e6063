use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("no raters")]
    NoRaters,

    #[error("invalid box: {0}")]
    InvalidBox(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed json in {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },

    #[error("raw size mismatch in {path}: expected {expected} bytes, found {found}")]
    RawSizeMismatch {
        path: PathBuf,
        expected: u64,
        found: u64,
    },

    #[error("corrupt data: {0}")]
    Corrupt(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("weights not normalized (sum = {0})")]
    NotNormalized(f64),

    #[error("patch too small: size {got} < minimum {min}")]
    PatchTooSmall { got: usize, min: usize },

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("target not normalized (sum = {0})")]
    TargetNotNormalized(f64),

    #[error("incompatible checkpoint: {0}")]
    IncompatibleCheckpoint(String),

    #[error("stage order violation: {0}")]
    StageOrder(String),

    #[error("case id mismatch: {0}")]
    IdMismatch(String),
}

impl Error {
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
