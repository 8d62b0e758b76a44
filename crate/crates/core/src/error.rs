//! Error types shared across the crate.

use std::path::PathBuf;
use thiserror::Error;

/// Configuration parsing or invariant violation. Messages name the violated
/// invariant so a bad config file can be fixed from the error alone.
#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config parse error: {0}")]
    Parse(String),
    #[error("config invariant violated: {0}")]
    Invariant(String),
    #[error("config io error: {0}")]
    Io(#[from] std::io::Error),
}

/// Array shape mismatch at a block or operation boundary.
#[derive(Debug, Error)]
#[error("shape error: {0}")]
pub struct ShapeError(pub String);

/// Dataset loading, layout, and iteration errors.
#[derive(Debug, Error)]
pub enum DataError {
    #[error("malformed data file {path}: {reason}")]
    Format { path: PathBuf, reason: String },
    #[error("label value {value} out of range 0..8 in case {case}, slice {slice}")]
    LabelRange {
        case: String,
        slice: usize,
        value: i64,
    },
    #[error("case {case} is missing slice {slice}")]
    MissingSlice { case: String, slice: usize },
    #[error("dataset split contains no slices")]
    EmptyDataset,
    #[error("case {case} appears in both train and test splits")]
    SplitOverlap { case: String },
    #[error("data io error: {0}")]
    Io(#[from] std::io::Error),
}

/// Checkpoint and weight-file errors.
#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("unsupported checkpoint version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("malformed checkpoint or weight file: {0}")]
    Malformed(String),
    #[error("checkpoint does not match the requested config: {0}")]
    ConfigMismatch(String),
}

/// Training-time failures.
#[derive(Debug, Error)]
pub enum TrainError {
    #[error("training diverged at step {step}: loss is not finite")]
    Diverged {
        step: usize,
        last_checkpoint: Option<PathBuf>,
    },
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Shape(#[from] ShapeError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl TrainError {
    /// Process exit code contract: 0 success, 1 config error, 2 data error,
    /// 3 training divergence.
    pub fn exit_code(&self) -> i32 {
        match self {
            TrainError::Diverged { .. } => 3,
            TrainError::Config(_) => 1,
            TrainError::Data(_) => 2,
            TrainError::Checkpoint(CheckpointError::ConfigMismatch(_)) => 1,
            TrainError::Checkpoint(_) => 2,
            TrainError::Shape(_) => 1,
            TrainError::Io(_) => 2,
        }
    }
}
