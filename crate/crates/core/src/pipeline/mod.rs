//! File-based stages (phantom, acquire, reconstruct, fit, evaluate) and
//! multi-seed ablations over a working directory.

mod ablation;
mod config;
mod stages;

pub use ablation::{ablation_dir, run_ablation, AblationPlan, AblationReport, AblationRow, OrderingCount, PRESETS};
pub use config::{
    AblationSection, AcquisitionSection, FitSection, MotionLevel, PhantomSection, PipelineConfig, ReconOverrides,
    ReconSection, RunSection, TissueEntry, TISSUE_KEYS,
};
pub use stages::{
    load_checkpoints, load_stacks, load_truth_poses, read_poses, run_acquire, run_all, run_evaluate, run_fit,
    run_phantom, run_reconstruct, te_tag, AcquisitionManifest, PoseRow, ReconOutcome, StackRecord, StackSidecar,
    TruthPose, Workdir,
};

use crate::error::Error;

/// Process exit code for an error.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) => 2,
        Error::MissingInput(_) => 3,
        Error::NonFiniteLoss { .. } | Error::NonFiniteGradient => 4,
        _ => 1,
    }
}
