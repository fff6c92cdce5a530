//! Variational committor training with adaptively refined training sets.
//!
//! The interior part of the loss is estimated by importance sampling over a
//! training set built in stages. Stage `j` holds `n_j` points drawn from a
//! proposal `p_j` together with `log p_j` at each point, and gets the mixture
//! weight `α_j = n_j / Σ n`. Each sample contributes
//! `|∇q(x)|² e^{-βV(x)} / p_j(x)`.
//!
//! Between rounds of committor training, a flow is fit to
//! `|∇q|² e^{-β(V + V_bias)}` and its samples refine the training set.

mod loss;
mod run;

pub use loss::{
    is_ratios, sampling_density_unnorm, variational_loss, BoundarySet, IsMode, IsRatios,
};
pub use run::{
    dastr_run, train_committor, AdaptiveSampler, CommittorTraining, DastrConfig, DastrOutcome, Evaluator,
    FlowSampler, RunOptions, SamplerReport, StageMetrics, StageTimings,
};

pub(crate) use run::{load_json, save_json};

use rand::RngCore;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AutodiffError, Tensor};
use crate::checkpoint::CheckpointError;
use crate::flow::FlowError;
use crate::nets::NetError;
use crate::potentials::{Potential, PotentialError};
use crate::sde::SdeError;

#[derive(Debug, Error)]
pub enum DastrError {
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Flow(#[from] FlowError),
    #[error(transparent)]
    Potential(#[from] PotentialError),
    #[error(transparent)]
    Sde(#[from] SdeError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("{skipped} of {total} importance ratios were not finite")]
    TooManySkipped { skipped: usize, total: usize },
    #[error("new stage is empty")]
    EmptyStage,
    #[error("invalid training set: {0}")]
    InvalidSet(String),
    #[error("invalid configuration: {0}")]
    Invalid(String),
    #[error("{what}: {source}")]
    Io {
        what: String,
        #[source]
        source: std::io::Error,
    },
    #[error("evaluation: {0}")]
    Eval(#[source] Box<dyn std::error::Error + Send + Sync>),
    #[error("sampler: {0}")]
    Sampler(#[source] Box<dyn std::error::Error + Send + Sync>),
    #[error("stage {stage}: {source}")]
    Stage {
        stage: usize,
        #[source]
        source: Box<DastrError>,
    },
}

pub type Result<T> = std::result::Result<T, DastrError>;

impl DastrError {
    /// Stage index of the failure, if it happened inside the stage loop.
    pub fn stage(&self) -> Option<usize> {
        match self {
            DastrError::Stage { stage, .. } => Some(*stage),
            _ => None,
        }
    }
}

/// Points from one proposal, with `log p_j` at each point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stage {
    pub dim: usize,
    pub samples: Vec<f64>,
    pub log_density: Vec<f64>,
}

impl Stage {
    pub fn new(samples: Tensor, log_density: Vec<f64>) -> Result<Self> {
        if samples.rank() != 2 || samples.rows() != log_density.len() {
            return Err(DastrError::InvalidSet(format!(
                "{:?} samples with {} densities",
                samples.shape(),
                log_density.len()
            )));
        }
        Ok(Self {
            dim: samples.cols(),
            samples: samples.into_data(),
            log_density,
        })
    }

    pub fn len(&self) -> usize {
        self.log_density.len()
    }

    pub fn is_empty(&self) -> bool {
        self.log_density.is_empty()
    }

    pub fn tensor(&self) -> Tensor {
        Tensor::new(vec![self.len(), self.dim], self.samples.clone()).expect("stage shape")
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.samples[i * self.dim..(i + 1) * self.dim]
    }

    /// The first `n` points.
    pub fn head(&self, n: usize) -> Stage {
        let n = n.min(self.len());
        Stage {
            dim: self.dim,
            samples: self.samples[..n * self.dim].to_vec(),
            log_density: self.log_density[..n].to_vec(),
        }
    }
}

/// How generated points enter the training set.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum RefinePolicy {
    /// The new stage replaces every earlier stage.
    ReplaceAll,
    /// The first `fraction · N₀` initial points stay; the new stage replaces
    /// any earlier generated stage.
    KeepFraction { fraction: f64 },
    /// Every stage is kept.
    Accumulate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StagedTrainingSet {
    stages: Vec<Stage>,
    /// The initial stage as first given, for [`RefinePolicy::KeepFraction`].
    origin: Stage,
}

impl StagedTrainingSet {
    pub fn new(initial: Stage) -> Result<Self> {
        if initial.is_empty() {
            return Err(DastrError::EmptyStage);
        }
        Ok(Self {
            stages: vec![initial.clone()],
            origin: initial,
        })
    }

    pub fn stages(&self) -> &[Stage] {
        &self.stages
    }

    pub fn dim(&self) -> usize {
        self.origin.dim
    }

    pub fn len(&self) -> usize {
        self.stages.iter().map(Stage::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `α_j = n_j / Σ n`.
    pub fn alphas(&self) -> Vec<f64> {
        let total = self.len() as f64;
        self.stages.iter().map(|s| s.len() as f64 / total).collect()
    }

    /// Stage index of every point, in [`Self::samples`] order.
    pub fn stage_index(&self) -> Vec<usize> {
        self.stages
            .iter()
            .enumerate()
            .flat_map(|(j, s)| std::iter::repeat_n(j, s.len()))
            .collect()
    }

    /// All points stacked in stage order.
    pub fn samples(&self) -> Tensor {
        let data: Vec<f64> = self.stages.iter().flat_map(|s| s.samples.iter().copied()).collect();
        Tensor::new(vec![self.len(), self.dim()], data).expect("set shape")
    }

    pub fn log_densities(&self) -> Vec<f64> {
        self.stages.iter().flat_map(|s| s.log_density.iter().copied()).collect()
    }

    /// Checks that stored densities are finite and no point lies in `A ∪ B`.
    pub fn validate(&self, p: &dyn Potential) -> Result<()> {
        for (j, s) in self.stages.iter().enumerate() {
            if s.dim != p.dim() {
                return Err(DastrError::InvalidSet(format!("stage {j} has dimension {}", s.dim)));
            }
            for i in 0..s.len() {
                if !s.log_density[i].is_finite() {
                    return Err(DastrError::InvalidSet(format!("stage {j} point {i}: log-density not finite")));
                }
                if p.in_ab(s.row(i)) {
                    return Err(DastrError::InvalidSet(format!("stage {j} point {i} lies in A ∪ B")));
                }
            }
        }
        Ok(())
    }
}

/// Adds `new` to the training set according to `policy`.
pub fn refine_training_set(tset: &StagedTrainingSet, new: Stage, policy: RefinePolicy) -> Result<StagedTrainingSet> {
    if new.is_empty() {
        return Err(DastrError::EmptyStage);
    }
    if new.dim != tset.dim() {
        return Err(DastrError::InvalidSet(format!("new stage has dimension {}", new.dim)));
    }
    let stages = match policy {
        RefinePolicy::ReplaceAll => vec![new],
        RefinePolicy::KeepFraction { fraction } => {
            if !(0.0..=1.0).contains(&fraction) {
                return Err(DastrError::Invalid(format!("keep fraction {fraction}")));
            }
            let keep = (fraction * tset.origin.len() as f64).round() as usize;
            let mut v = Vec::with_capacity(2);
            if keep > 0 {
                v.push(tset.origin.head(keep));
            }
            v.push(new);
            v
        }
        RefinePolicy::Accumulate => {
            let mut v = tset.stages.clone();
            v.push(new);
            v
        }
    };
    Ok(StagedTrainingSet {
        stages,
        origin: tset.origin.clone(),
    })
}

/// Uniform points on `Ω \ (A ∪ B)` as an initial stage.
pub fn uniform_stage(p: &dyn Potential, n: usize, rng: &mut dyn RngCore) -> Result<Stage> {
    let x = crate::potentials::sample_interior(p, n, rng);
    let ld = vec![p.interior_log_density(); x.rows()];
    Stage::new(x, ld)
}

/// Points from a Gibbs-like density `∝ e^{-β_s(V + V_bias)}`, stored with
/// that unnormalized log-density.
pub fn gibbs_stage(samples: Tensor, log_weights: Vec<f64>) -> Result<Stage> {
    Stage::new(samples, log_weights)
}
