use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {left:?} vs {right:?}")]
    Shape {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("invalid tensor: {0}")]
    InvalidTensor(String),
    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),
    #[error("empty loss support: every target position is padding")]
    EmptyLossSupport,
    #[error("missing gradient for parameter `{0}`")]
    MissingGradient(String),
    #[error("parameter error: {0}")]
    Parameter(String),
    #[error("invalid config field `{field}`: {reason}")]
    Config { field: String, reason: String },
    #[error("invalid input: {0}")]
    Input(String),
    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),
    #[error("checkpoint version mismatch: file has {found}, expected {expected}")]
    CheckpointVersion { found: u32, expected: u32 },
    #[error("checkpoint config mismatch on field `{field}`: checkpoint has {found}, expected {expected}")]
    ConfigMismatch {
        field: String,
        found: String,
        expected: String,
    },
    #[error("{path}:{line}: {reason}")]
    Annotation {
        path: PathBuf,
        line: usize,
        reason: String,
    },
    #[error("image file {path}: {reason}")]
    Image { path: PathBuf, reason: String },
    #[error("vocabulary: {0}")]
    Vocab(String),
    #[error("metric: {0}")]
    Metric(String),
    #[error("gradient check failed: {0}")]
    GradCheck(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Stable short code used as the machine-parsable prefix of CLI errors.
    pub fn code(&self) -> &'static str {
        match self {
            Error::Shape { .. } => "shape",
            Error::InvalidTensor(_) => "tensor",
            Error::NonFinite(_) => "non-finite",
            Error::EmptyLossSupport => "empty-loss-support",
            Error::MissingGradient(_) => "missing-gradient",
            Error::Parameter(_) => "parameter",
            Error::Config { .. } => "config",
            Error::Input(_) => "input",
            Error::CorruptCheckpoint(_) => "corrupt-checkpoint",
            Error::CheckpointVersion { .. } => "checkpoint-version",
            Error::ConfigMismatch { .. } => "config-mismatch",
            Error::Annotation { .. } => "annotation",
            Error::Image { .. } => "image",
            Error::Vocab(_) => "vocab",
            Error::Metric(_) => "metric",
            Error::GradCheck(_) => "gradcheck",
            Error::Io { .. } => "io",
            Error::Json(_) => "json",
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            reason: reason.into(),
        }
    }
}
