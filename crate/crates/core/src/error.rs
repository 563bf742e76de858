use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Failures surfaced by model backends.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum BackendError {
    #[error("request failed after {attempts} attempts: {message}")]
    Transport { attempts: u32, message: String },
    #[error("provider returned an unusable response: {0}")]
    Protocol(String),
    #[error("backend `{backend}` does not support {capability}; use the mock backend or a two-call fallback")]
    Capability { backend: String, capability: String },
    #[error("backend configuration error: {0}")]
    Config(String),
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed dataset: {0}")]
    Parse(String),
    #[error("record {index}: {message}")]
    Record { index: usize, message: String },
    #[error("empty input: {0}")]
    Empty(&'static str),
    #[error("length mismatch: {what} ({left} vs {right})")]
    LengthMismatch {
        what: &'static str,
        left: usize,
        right: usize,
    },
    #[error("degenerate relevance judgment: p_true and p_false are both zero")]
    DegenerateJudgment,
    #[error("value {0} outside the open interval (0, 1)")]
    Domain(f64),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("index {index} out of range for vocabulary of size {len}")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("F1 undefined: dev labels contain a single class")]
    SingleClass { sweep: crate::policy::ThresholdSweep },
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error("all {0} questions failed")]
    AllFailed(usize),
    #[error("report inconsistency: {0}")]
    Inconsistent(String),
    #[error("configuration error: {0}")]
    Config(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
