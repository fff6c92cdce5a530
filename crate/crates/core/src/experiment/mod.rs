//! Experiment runner: a TOML config names an experiment, the run writes
//! metrics, checkpoints, plot data and a manifest into its output directory.
//!
//! Files in the output directory:
//!
//! | file | content |
//! |---|---|
//! | `metrics.csv` | one row per stage: `stage,loss,error,acceptance,ce_loss,samples,skipped` |
//! | `timing.csv` | `stage,committor_seconds,sampler_seconds` |
//! | `summary.json` | final scalar metrics |
//! | `norms.json`, `curve.csv` | Brownian runs: sample-norm histogram, validation curve |
//! | `isosurface.json`, `grid.csv` | rugged Mueller runs: half-isosurface check, committor on a grid |
//! | `samples.csv` | final training set |
//! | `checkpoints/` | per-stage state; a rerun resumes from it |
//! | `manifest.json` | config snapshot, build id, file list, wall clock |
//!
//! Everything except `timing.csv` and the wall clock in the manifest is a
//! function of the config alone.

mod config;
mod report;
mod run;

pub use config::{
    apply_override, load_config, parse_config, DastrSection, EvalSection, ExperimentConfig, ExperimentId,
    FlowSamplerSection, InitialSection, IsoPool, IsosurfaceSection, LatentSamplerSection, NetSection, SamplerSection,
    OUTPUT_ROOT_ENV,
};
pub use report::{read_metrics, report, MetricsRow};
pub use run::{run_experiment, RunManifest, RunSettings, METRICS_HEADER};

use std::path::PathBuf;

use thiserror::Error;

use crate::dastr::DastrError;

/// A schema or consistency violation in a config, with the key it concerns.
#[derive(Debug, Clone, PartialEq, Error)]
#[error("{}{message}", if path.is_empty() { String::new() } else { format!("{path}: ") })]
pub struct ConfigError {
    pub path: String,
    pub message: String,
}

impl ConfigError {
    pub fn new(path: &str, message: impl Into<String>) -> Self {
        Self {
            path: path.to_string(),
            message: message.into(),
        }
    }
}

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("config error: {0}")]
    Config(#[from] ConfigError),
    #[error("stage {stage}: {source}")]
    Stage {
        stage: usize,
        #[source]
        source: DastrError,
    },
    #[error("{what}: {source}")]
    Setup {
        what: String,
        #[source]
        source: Box<dyn std::error::Error + Send + Sync>,
    },
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{} holds checkpoints of a different config; use a fresh output_dir", path.display())]
    CheckpointMismatch { path: PathBuf },
    #[error("{0}")]
    Report(String),
}

impl ExperimentError {
    /// Process exit status: 2 for config errors, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            ExperimentError::Config(_) => 2,
            _ => 1,
        }
    }

    pub fn stage(&self) -> Option<usize> {
        match self {
            ExperimentError::Stage { stage, .. } => Some(*stage),
            _ => None,
        }
    }

    pub(crate) fn setup(what: impl Into<String>, e: impl std::error::Error + Send + Sync + 'static) -> Self {
        ExperimentError::Setup {
            what: what.into(),
            source: Box::new(e),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        ExperimentError::Io {
            path: path.into(),
            source,
        }
    }
}

impl From<DastrError> for ExperimentError {
    fn from(e: DastrError) -> Self {
        match e {
            DastrError::Stage { stage, source } => ExperimentError::Stage { stage, source: *source },
            other => ExperimentError::setup("setup", other),
        }
    }
}
