use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid box: {0}")]
    InvalidBox(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("index out of range: {0}")]
    Index(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("{path}:{line}: {msg}")]
    Parse { path: String, line: usize, msg: String },

    #[error("file not found: {0}")]
    MissingFile(PathBuf),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image error on {path}: {msg}")]
    Image { path: PathBuf, msg: String },

    #[error("json error on {path}: {msg}")]
    Json { path: PathBuf, msg: String },

    #[error("checkpoint mismatch: {0}")]
    CheckpointMismatch(String),

    #[error("tracker state: {0}")]
    State(String),

    #[error("training sample rejected: {0}")]
    SampleRejected(String),

    #[error("sequence too short: {0}")]
    SequenceTooShort(String),

    #[error("non-finite loss at step {step}: diagnostics written to {dump}")]
    NonFinite { step: usize, dump: PathBuf },
}

impl Error {
    /// Stable machine-readable class name, one per variant family.
    pub fn class(&self) -> &'static str {
        match self {
            Error::InvalidBox(_) => "invalid-box",
            Error::Shape(_) => "shape",
            Error::Index(_) => "index",
            Error::Config(_) => "bad-config",
            Error::Parse { .. } => "parse",
            Error::MissingFile(_) => "missing-file",
            Error::Io { .. } => "io",
            Error::Image { .. } => "image",
            Error::Json { .. } => "json",
            Error::CheckpointMismatch(_) => "checkpoint-mismatch",
            Error::State(_) => "state",
            Error::SampleRejected(_) => "sample-rejected",
            Error::SequenceTooShort(_) => "sequence-too-short",
            Error::NonFinite { .. } => "non-finite",
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        let path = path.into();
        if source.kind() == std::io::ErrorKind::NotFound {
            Error::MissingFile(path)
        } else {
            Error::Io { path, source }
        }
    }

    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }
}
