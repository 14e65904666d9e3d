//! End-to-end orchestration: data ingestion and patching, the search,
//! meta-initialization and joint phases, checkpoints, fusion, evaluation
//! and reports.

mod checkpoint;
mod config;
mod ingest;
mod manifest;
mod optim;
mod patch;
mod phases;
mod report;
mod synth;

pub use checkpoint::{Checkpoint, CHECKPOINT_VERSION};
pub use config::{
    DataConfig, ExperimentConfig, JointConfig, Optimizer, PhaseToggles, SyntheticSource,
    TaskManifest, TaskSource,
};
pub use ingest::{
    decode, ingest, load_image, rgb, save_color, save_gray, save_pair, ycbcr, ImagePair,
};
pub use manifest::{file_sha256, RunManifest, MANIFEST_FILE};
pub use optim::OptimizerState;
pub use patch::{batches, flip_horizontal, patchify, rotate90, Augment, Patch};
pub use phases::{
    checkpoint_path, joint_train, run_all, run_phase_joint, run_phase_meta, run_phase_search,
    Experiment, JointHistory, JointOutcome, JointRecord, Model, PhaseResult, RunSummary, TaskData,
};
pub use report::{evaluate_paths, report, AggregateRow, ReportOutput, HISTORY_FILES};
pub use synth::{synthesize, SynthStyle};
