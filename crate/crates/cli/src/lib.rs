//! Pipeline driver behind the `kbp` binary.
//!
//! A run lives in one output directory:
//!
//! ```text
//! config.toml  manifest.json
//! data/split.json  data/<patient>/{phantom.json, labels.kbpv, density.kbpv,
//!                                  influence.kbpi, reference.kbpp, reference.json}
//! models/{gan.kbpt, gan_epochs.csv, gan_steps.csv, cnn.kbpt, cnn_epochs.csv, rf.json}
//! predictions/<model>/<patient>.kbpv
//! plans/<model>-<mode>/<patient>.{kbpp,json}  plans/<model>-<mode>/errors.json
//! report/*.csv  report/dvh/*.csv  report/*.svg  report/summary.md
//! ```
//!
//! Stages: gen-data, train, predict, optimize, evaluate, report. Each records
//! its artifacts in the manifest; rerunning a completed stage under the same
//! config hash does nothing unless forced.

mod config;
mod manifest;
mod pipeline;

pub use config::{
    split_sizes, DatasetConfig, EvaluationConfig, Method, Model, OptMode, OptimizationConfig, PhysicsConfig,
    PipelineConfig,
};
pub use manifest::{RunManifest, Split, StageRecord, MANIFEST_FILE};
pub use pipeline::{
    cmd_evaluate, cmd_gen_data, cmd_optimize, cmd_predict, cmd_report, cmd_train, load_patient, patient_name,
    EvaluationSummary, EvaluationEntry, Patient, PlanRecord, Run,
};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("missing stage: {0}")]
    MissingStage(String),
    #[error("{0}")]
    Failure(String),
    #[error("{context}: {source}")]
    Io { context: String, source: std::io::Error },
}

impl CliError {
    /// Process exit status: 2 config, 3 missing upstream stage, 4 solver,
    /// training or I/O failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::MissingStage(_) => 3,
            CliError::Failure(_) | CliError::Io { .. } => 4,
        }
    }

    pub(crate) fn fail(e: impl std::fmt::Display) -> Self {
        CliError::Failure(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, CliError>;
