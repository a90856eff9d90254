use std::path::PathBuf;
use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Shape or size disagreement between tensors handed to an op.
    #[error("{op}: shape mismatch: {detail}")]
    Shape { op: &'static str, detail: String },

    /// Argument outside an op's documented domain (empty input, I < J, ...).
    #[error("{op}: invalid argument: {detail}")]
    Invalid { op: &'static str, detail: String },

    /// A TensorId minted by one tape was handed to a different tape.
    #[error("tensor belongs to tape {got}, not tape {expected}")]
    TapeMismatch { expected: u64, got: u64 },

    #[error("config: {0}")]
    Config(String),

    #[error("manifest line {line}: {detail}")]
    Manifest { line: usize, detail: String },

    #[error("wav {path}: {detail}")]
    Wav { path: PathBuf, detail: String },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    /// Training hit a non-finite loss or gradient; carries the utterance id.
    #[error("training aborted: {0}")]
    Diverged(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape { op, detail: detail.into() }
    }

    pub fn invalid(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Invalid { op, detail: detail.into() }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}
