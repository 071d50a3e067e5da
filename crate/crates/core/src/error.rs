use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Coarse classification used by the CLI to pick an exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Config,
    Dependency,
    Numeric,
    Data,
    Io,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: expected {expected}, got {actual}")]
    ShapeMismatch { expected: String, actual: String },

    #[error("label {label} out of range for {num_classes} classes")]
    LabelOutOfRange { label: usize, num_classes: usize },

    #[error("non-finite values in `{tensor}`")]
    NonFinite { tensor: String },

    #[error("training diverged at epoch {epoch} (last finite epoch: {last_finite_epoch})")]
    Divergence {
        epoch: usize,
        last_finite_epoch: usize,
    },

    #[error("empty split: {0}")]
    EmptySplit(String),

    #[error("empty dataset: {0}")]
    EmptyDataset(String),

    #[error("manifest has {manifest} rows but tensor file holds {tensors} tensors")]
    LengthMismatch { manifest: usize, tensors: usize },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("too few points: need at least {required}, got {actual}")]
    TooFewPoints { required: usize, actual: usize },

    #[error("stage `{stage}` requires stage `{required}` to be completed first")]
    MissingStage { stage: String, required: String },

    #[error(
        "stage `{stage}` was completed under a different configuration (recorded {recorded}, current {current}); \
         remove `{dir}` and the stages after it to recompute"
    )]
    ConfigMismatch {
        stage: String,
        recorded: String,
        current: String,
        dir: PathBuf,
    },

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("toml: {0}")]
    Toml(#[from] toml::de::Error),

    #[error("malformed file {path}: {reason}")]
    Malformed { path: PathBuf, reason: String },
}

impl Error {
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::InvalidConfig(_) | Error::Toml(_) => ErrorKind::Config,
            Error::MissingStage { .. } | Error::ConfigMismatch { .. } => ErrorKind::Dependency,
            Error::NonFinite { .. } | Error::Divergence { .. } | Error::Degenerate(_) => {
                ErrorKind::Numeric
            }
            Error::Io { .. } => ErrorKind::Io,
            _ => ErrorKind::Data,
        }
    }

    pub(crate) fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            context: context.into(),
            source,
        }
    }

    pub(crate) fn malformed(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Malformed {
            path: path.into(),
            reason: reason.into(),
        }
    }
}
