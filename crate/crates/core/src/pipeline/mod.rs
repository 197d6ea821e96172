//! Experiment pipelines: stamped artifacts on disk, one function per stage.
//!
//! Each stage reads what earlier stages wrote into the output directory and
//! writes its own files there, so running the stages one at a time produces
//! the same bytes as [`run_pipeline`]. Every file carries the configuration
//! hash and root seed, and a stage refuses JSON inputs stamped by a different
//! configuration.
//!
//! Gap-split tasks run training through evaluation once per split, in
//! `split_<k>` subdirectories, and summarize the splits in a top-level
//! `metrics.json`.

mod artifacts;
mod config;
mod stages;

pub use artifacts::{predictions_file, read_predictions, write_predictions, PredictionRow, Stamp, Stamped};
pub use config::{
    DapSpec, DistanceSpec, ExperimentConfig, InferenceMethod, InferenceSpec, MaskSpec, ModelSpec, NoiseSpec, OodGenerator,
    OutputSpec, ProjectorKind, TaskSpec,
};
pub use config::CalibrationSpec;
pub use stages::{run_pipeline, run_stage, DataMeta, Fitted, GapSplitSummary, GapSummary, Stage, UnitMeta, UnitReport, DATA_META};

/// File names inside an output directory (or a `split_<k>` subdirectory).
pub mod files {
    pub use super::artifacts::{
        BAND, CALIBRATION, CALIB_INPUTS, GRID, LOSS_CURVE, METRICS, MODEL, OOD, POSTERIOR, SPLITS, SWEEP, TEST, TRAIN,
        TRAIN_TRACE, VALIDATION,
    };
}
