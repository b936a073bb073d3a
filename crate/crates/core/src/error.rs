use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("op {op} ({name}): shape mismatch, expected {expected}, got {actual}")]
    ShapeMismatch {
        op: usize,
        name: &'static str,
        expected: String,
        actual: String,
    },

    #[error("invalid shape: {0}")]
    InvalidShape(String),

    #[error("unbound input '{0}'")]
    UnboundInput(String),

    #[error("unknown node {0}")]
    UnknownNode(usize),

    #[error("gradient seed must have shape [1], got {0:?}")]
    NonScalarSeed(Vec<usize>),

    #[error("gradient tape already consumed; evaluate the graph again")]
    TapeConsumed,

    #[error("graph has not been evaluated")]
    NotEvaluated,

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("batch norm needs at least 2 values per channel in train mode, got {0}")]
    BatchTooSmall(usize),

    #[error("step {step} is outside the schedule of {total} steps")]
    ScheduleExhausted { step: usize, total: usize },

    #[error("dataset: {0}")]
    Dataset(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("checkpoint does not match model: {0}")]
    CheckpointMismatch(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error: {0}")]
    Parse(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Short stable identifier used by the CLI's machine-readable error line.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::ShapeMismatch { .. } | Error::InvalidShape(_) => "shape",
            Error::UnboundInput(_) | Error::UnknownNode(_) => "graph",
            Error::NonScalarSeed(_) | Error::TapeConsumed | Error::NotEvaluated => "autodiff",
            Error::NonFinite(_) => "non_finite",
            Error::Config(_) => "config",
            Error::LabelOutOfRange { .. } => "label",
            Error::BatchTooSmall(_) => "batch",
            Error::ScheduleExhausted { .. } => "schedule",
            Error::Dataset(_) => "dataset",
            Error::Checkpoint(_) => "checkpoint",
            Error::CheckpointMismatch(_) => "checkpoint_mismatch",
            Error::Io { .. } => "io",
            Error::Parse(_) => "parse",
        }
    }
}
