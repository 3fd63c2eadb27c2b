use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("empty mask")]
    EmptyMask,
    #[error("constant region: masked standard deviation is zero")]
    ConstantRegion,
    #[error("invalid bins: need at least 2, got {0}")]
    InvalidBins(usize),
    #[error("unreadable volume {path}: {reason}")]
    UnreadableVolume { path: PathBuf, reason: String },
    #[error("duplicate landmark id {0}")]
    DuplicateLandmark(i64),
    #[error("malformed landmark file {path}: {reason}")]
    MalformedLandmarks { path: PathBuf, reason: String },
    #[error("landmark ids differ; missing from moving: {missing_in_moving:?}, missing from fixed: {missing_in_fixed:?}")]
    LandmarkMismatch {
        missing_in_moving: Vec<i64>,
        missing_in_fixed: Vec<i64>,
    },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("incompatible shape: {0}")]
    IncompatibleShape(String),
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("invalid volume: {0}")]
    InvalidVolume(String),
    #[error("empty input: {0}")]
    Empty(&'static str),
    #[error("non-finite loss at step {step}: {report}")]
    NonFiniteLoss { step: usize, report: String },
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
