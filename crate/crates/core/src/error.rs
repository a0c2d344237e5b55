use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("dimension error: {0}")]
    Shape(String),
    #[error("contract error: {0}")]
    Contract(String),
    #[error("backward already ran on this tape; record a new forward pass first")]
    DoubleBackward,
    #[error("degenerate batch: {0}")]
    DegenerateBatch(String),
    #[error("non-finite value: {0}")]
    NonFinite(String),
}

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint format error: {0}")]
    Format(String),
    #[error("checkpoint is missing tensor `{0}`")]
    Missing(String),
    #[error("checkpoint tensor `{name}` has shape {found:?}, expected {expected:?}")]
    ShapeMismatch { name: String, expected: Vec<usize>, found: Vec<usize> },
    #[error("i/o error on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("i/o error on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: malformed manifest: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("unsupported manifest schema version `{0}`")]
    SchemaVersion(String),
    #[error("entry {entry}: field `{field}` has {found} values, expected {expected}")]
    Length { entry: usize, field: &'static str, expected: usize, found: usize },
    #[error("entry {entry}: variable {index} is marked valid but has no finite value")]
    InvalidValue { entry: usize, index: usize },
    #[error("image file not found: {0}")]
    MissingImage(PathBuf),
    #[error("cannot decode image {path}: {message}")]
    Decode { path: PathBuf, message: String },
    #[error("cannot encode image {path}: {message}")]
    Encode { path: PathBuf, message: String },
    #[error("variable index {index} out of range for {k} variables")]
    VariableIndex { index: usize, k: usize },
    #[error("invalid request: {0}")]
    Invalid(String),
}

#[derive(Debug, Error)]
pub enum ProbeError {
    #[error("no samples to fit")]
    Empty,
    #[error("feature/target length mismatch: {0}")]
    Mismatch(String),
    #[error("normal equations are singular after damping")]
    Singular,
    #[error("no variable has enough valid rows to probe")]
    NothingProbeable,
    #[error("group `{0}` is empty")]
    EmptyGroup(String),
    #[error("group `{name}` lists variable {index} more than once")]
    DuplicateIndex { name: String, index: usize },
    #[error("group `{name}` references variable {index}, but there are only {k}")]
    GroupIndex { name: String, index: usize, k: usize },
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("i/o error on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("invalid configuration: {0}")]
    Invalid(String),
    #[error("unknown method `{0}` (expected simclr, byol or swav)")]
    UnknownMethod(String),
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("training dataset is empty")]
    EmptyDataset,
    #[error("dataset of {frames} frames yields no full batch of {batch_size}")]
    NoFullBatch { frames: usize, batch_size: usize },
    #[error("numerical abort at step {step} (epoch {epoch}): {reason}; last good state kept{}", .checkpoint.as_ref().map(|p| format!(" in {}", p.display())).unwrap_or_default())]
    NumericalAbort { step: usize, epoch: usize, reason: String, checkpoint: Option<PathBuf> },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}
