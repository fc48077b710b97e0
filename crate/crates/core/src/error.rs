use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("box {bbox:?} is outside a {width}x{height} image")]
    BoxOutOfBounds {
        bbox: crate::bbox::BoundingBox,
        width: u32,
        height: u32,
    },

    #[error("cannot split {subjects} subjects into {splits} non-empty splits")]
    TooFewSubjects { subjects: usize, splits: usize },

    #[error("resolution {0} is not a supported power of two")]
    BadResolution(i64),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("stage {stage} is beyond the schedule ({stages} stages)")]
    StageOutOfRange { stage: usize, stages: usize },

    #[error("dataset is empty: {0}")]
    EmptyDataset(&'static str),

    #[error(
        "quality filter accepted {accepted} of {attempts} samples \
         (acceptance rate {rate:.3}); needed {requested}"
    )]
    FilterCapExceeded {
        requested: usize,
        accepted: usize,
        attempts: usize,
        rate: f64,
    },

    #[error("need at least {needed} boxes, got {got}")]
    TooFewBoxes { needed: usize, got: usize },

    #[error("{n} points cannot support perplexity {perplexity}; use perplexity < {max:.1}")]
    PerplexityTooLarge { n: usize, perplexity: f64, max: f64 },

    #[error("no ground-truth boxes; sensitivity is undefined")]
    NoGroundTruth,

    #[error("no checkpoint inside the selection window")]
    EmptyWindow,

    #[error("response set is invalid: {0}")]
    Responses(String),

    #[error("session error: {0}")]
    Session(String),

    #[error("checkpoint {path}: {reason}")]
    Checkpoint { path: PathBuf, reason: String },

    #[error("parse error in {path}:{line}: {reason}")]
    Parse {
        path: PathBuf,
        line: usize,
        reason: String,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Torch(#[from] tch::TchError),
}
