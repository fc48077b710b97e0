//! Classic augmentation and the augmentation experiment matrix.

mod augment;
mod matrix;

pub use augment::{classic_augment, ClassicAugConfig, ClassicDraw};
pub use matrix::{
    all_setups, parse_setup, plan_runs, run_matrix, scaled_count, CheckpointPaths, ExperimentRun, Family, LeakageAudit, MatrixConfig,
    MatrixOutcome, RunRecord, SampleSettings, REFERENCE_REAL_COUNT, SYNTHETIC_TIERS,
};
