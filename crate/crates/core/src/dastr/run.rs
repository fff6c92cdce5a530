use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::{index, SliceRandom};
use rand::RngCore;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::loss::{is_ratios, sampling_density_unnorm, variational_loss, BoundarySet, IsMode, IsRatios};
use super::{refine_training_set, DastrError, RefinePolicy, Result, Stage, StagedTrainingSet};
use crate::autodiff::Tape;
use crate::checkpoint::{write_atomic, Checkpoint, Parameterized};
use crate::flow::{train_flow_ce, CeConfig, FlowModel};
use crate::nets::{CommittorModel, CommittorNet};
use crate::optim::{Adam, StepDecay};
use crate::potentials::Potential;
use crate::rng::{derive, seeded};
use crate::sde::Bias;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CommittorTraining {
    /// Epochs per stage.
    pub epochs: usize,
    pub batch: usize,
    pub lr: StepDecay,
    pub lambda: f64,
    /// Boundary points per step from each of `∂A`, `∂B`.
    pub boundary_batch: usize,
    #[serde(default)]
    pub mode: IsMode,
    #[serde(default = "default_max_skipped")]
    pub max_skipped: f64,
    /// Subtracted from `-βV` in the importance ratios; `log Z` turns the
    /// weight into the normalized Gibbs density.
    #[serde(default)]
    pub log_normalizer: f64,
}

fn default_max_skipped() -> f64 {
    0.05
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DastrConfig {
    pub stages: usize,
    pub committor: CommittorTraining,
    pub policy: RefinePolicy,
}

impl DastrConfig {
    pub fn validate(&self) -> Result<()> {
        let c = &self.committor;
        if self.stages == 0 || c.epochs == 0 || c.batch == 0 || c.boundary_batch == 0 {
            return Err(DastrError::Invalid("stage, epoch and batch counts must be positive".into()));
        }
        if !(c.lambda > 0.0) {
            return Err(DastrError::Invalid(format!("lambda = {}", c.lambda)));
        }
        Ok(())
    }
}

/// Minimizes the variational loss over `tset` for `cfg.epochs` epochs of
/// `⌈|S| / m⌉` steps. Returns the mean step loss of each epoch.
#[allow(clippy::too_many_arguments)]
pub fn train_committor(
    net: &mut CommittorNet,
    tset: &StagedTrainingSet,
    ratios: &IsRatios,
    boundary: &BoundarySet,
    cfg: &CommittorTraining,
    opt: &mut Adam,
    epoch_offset: usize,
    rng: &mut dyn RngCore,
) -> Result<Vec<f64>> {
    let samples = tset.samples();
    let mut order = ratios.valid.clone();
    let na = boundary.a.rows();
    let nb = boundary.b.rows();
    let mut losses = Vec::with_capacity(cfg.epochs);
    for e in 0..cfg.epochs {
        let lr = cfg.lr.lr_at(epoch_offset + e);
        order.shuffle(rng);
        let mut total = 0.0;
        let mut steps = 0;
        for chunk in order.chunks(cfg.batch) {
            let x = samples.gather_rows(chunk);
            let coef = ratios.batch_coefficients(chunk, cfg.mode);
            let ia = index::sample(rng, na, cfg.boundary_batch.min(na)).into_vec();
            let ib = index::sample(rng, nb, cfg.boundary_batch.min(nb)).into_vec();
            let ba = boundary.a.gather_rows(&ia);
            let bb = boundary.b.gather_rows(&ib);
            let mut tape = Tape::new();
            let params = net.bind(&mut tape);
            let loss = variational_loss(net, &mut tape, &params, &x, &coef, &ba, &bb, cfg.lambda)?;
            let value = tape.value(loss).item()?;
            if !value.is_finite() {
                return Err(DastrError::Invalid(format!("loss became {value} in epoch {}", epoch_offset + e)));
            }
            let grads = tape.grad_values(loss, &params)?;
            opt.step(lr, &mut net.params_mut(), &grads);
            total += value;
            steps += 1;
        }
        losses.push(total / steps.max(1) as f64);
    }
    Ok(losses)
}

/// New points for the next stage, with what the sampler learned on the way.
#[derive(Debug, Clone)]
pub struct SamplerReport {
    pub stage: Stage,
    /// Fraction of candidate points that were kept.
    pub acceptance: f64,
    /// Last epoch's cross-entropy of the density model.
    pub ce_loss: f64,
}

/// Produces the points of the next stage from the current committor.
pub trait AdaptiveSampler {
    fn refine(
        &mut self,
        p: &dyn Potential,
        net: &CommittorNet,
        tset: &StagedTrainingSet,
        rng: &mut dyn RngCore,
    ) -> Result<SamplerReport>;

    fn save(&self, dir: &Path) -> Result<()>;

    fn load(&mut self, dir: &Path) -> Result<()>;
}

/// A flow on the full space, fit by cross-entropy to
/// `|∇q|² e^{-β(V + V_bias)}` over the current training set. The flow is
/// warm-started from one stage to the next.
pub struct FlowSampler {
    pub flow: FlowModel,
    pub opt: Adam,
    pub training: CeConfig,
    pub new_samples: usize,
    pub bias: Option<Box<dyn Bias>>,
}

impl AdaptiveSampler for FlowSampler {
    fn refine(
        &mut self,
        p: &dyn Potential,
        net: &CommittorNet,
        tset: &StagedTrainingSet,
        rng: &mut dyn RngCore,
    ) -> Result<SamplerReport> {
        let x = tset.samples();
        let target = sampling_density_unnorm(net, p, self.bias.as_deref(), &x)?;
        let report = train_flow_ce(
            &mut self.flow,
            &x,
            &target,
            &tset.log_densities(),
            &self.training,
            &mut self.opt,
            rng,
        )?;
        let (new, rate) = self.flow.sample_outside_with_rate(self.new_samples, p, rng)?;
        // density of the flow conditioned on Ω \ (A ∪ B)
        let shift = rate.ln();
        let ld = self.flow.log_density(&new)?.into_iter().map(|v| v - shift).collect();
        Ok(SamplerReport {
            stage: Stage::new(new, ld)?,
            acceptance: rate,
            ce_loss: report.losses.last().copied().unwrap_or(f64::NAN),
        })
    }

    fn save(&self, dir: &Path) -> Result<()> {
        self.flow.to_checkpoint().save(&dir.join("flow.json"))?;
        save_json(&dir.join("flow-adam.json"), &self.opt)
    }

    fn load(&mut self, dir: &Path) -> Result<()> {
        self.flow = FlowModel::from_checkpoint(&Checkpoint::load(&dir.join("flow.json"))?)?;
        self.opt = load_json(&dir.join("flow-adam.json"))?;
        Ok(())
    }
}

/// Error of the committor against a reference, evaluated after each stage.
pub type Evaluator<'a> = &'a dyn Fn(&CommittorNet) -> Result<f64>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageMetrics {
    pub stage: usize,
    /// Mean step loss over the stage's last epoch.
    pub loss: f64,
    pub error: Option<f64>,
    /// Sampler acceptance for the points this stage produced.
    pub acceptance: Option<f64>,
    pub ce_loss: Option<f64>,
    /// Training-set size the committor was trained on.
    pub samples: usize,
    pub skipped: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StageTimings {
    pub stage: usize,
    pub committor_seconds: f64,
    pub sampler_seconds: f64,
}

#[derive(Debug)]
pub struct DastrOutcome {
    pub net: CommittorNet,
    /// Training set of the last stage.
    pub tset: StagedTrainingSet,
    pub metrics: Vec<StageMetrics>,
    pub timings: Vec<StageTimings>,
}

#[derive(Default)]
pub struct RunOptions<'a> {
    pub evaluator: Option<Evaluator<'a>>,
    /// Directory for per-stage checkpoints; a run in a directory that already
    /// holds some resumes after the last completed stage.
    pub checkpoint_dir: Option<PathBuf>,
    /// Called after every stage.
    pub on_stage: Option<&'a dyn Fn(&StageMetrics)>,
    /// Return once this many stages are complete, leaving the rest to a
    /// resumed call.
    pub stop_after: Option<usize>,
}

#[derive(Serialize, Deserialize)]
struct Progress {
    completed: usize,
    epochs_done: usize,
    metrics: Vec<StageMetrics>,
    timings: Vec<StageTimings>,
}

/// Runs `config.stages` stages of committor training. Between stages the
/// sampler, if any, refines the training set; without one the set stays
/// fixed. The last stage trains the committor only.
#[allow(clippy::too_many_arguments)]
pub fn dastr_run(
    config: &DastrConfig,
    p: &dyn Potential,
    mut net: CommittorNet,
    mut sampler: Option<&mut dyn AdaptiveSampler>,
    initial: StagedTrainingSet,
    boundary: &BoundarySet,
    seed: u64,
    options: RunOptions<'_>,
) -> Result<DastrOutcome> {
    config.validate()?;
    initial.validate(p)?;
    let mut tset = initial;
    let mut opt = Adam::default();
    let mut progress = Progress {
        completed: 0,
        epochs_done: 0,
        metrics: Vec::new(),
        timings: Vec::new(),
    };
    if let Some(dir) = &options.checkpoint_dir {
        if dir.join("progress.json").exists() {
            progress = load_json(&dir.join("progress.json"))?;
            net = CommittorNet::from_checkpoint(&Checkpoint::load(&dir.join("net.json"))?)?;
            opt = load_json(&dir.join("adam.json"))?;
            tset = load_json(&dir.join("training-set.json"))?;
            if let Some(s) = sampler.as_deref_mut() {
                s.load(dir)?;
            }
        } else {
            std::fs::create_dir_all(dir).map_err(|e| DastrError::Io {
                what: format!("creating {}", dir.display()),
                source: e,
            })?;
        }
    }

    for k in progress.completed..config.stages {
        let stage = (|| -> Result<(StageMetrics, StageTimings)> {
            let t0 = Instant::now();
            let mut ratios = is_ratios(&tset, p, config.committor.max_skipped)?;
            if config.committor.log_normalizer != 0.0 {
                let f = (-config.committor.log_normalizer).exp();
                ratios.ratio.iter_mut().for_each(|r| *r *= f);
            }
            let mut rng = seeded(derive(seed, &format!("stage{k}/committor")));
            let losses = train_committor(
                &mut net,
                &tset,
                &ratios,
                boundary,
                &config.committor,
                &mut opt,
                progress.epochs_done,
                &mut rng,
            )?;
            progress.epochs_done += config.committor.epochs;
            let error = options.evaluator.map(|f| f(&net)).transpose()?;
            let committor_seconds = t0.elapsed().as_secs_f64();

            let t1 = Instant::now();
            let samples = tset.len();
            let mut acceptance = None;
            let mut ce_loss = None;
            if k + 1 < config.stages {
                if let Some(s) = sampler.as_deref_mut() {
                    let mut rng = seeded(derive(seed, &format!("stage{k}/sampler")));
                    let report = s.refine(p, &net, &tset, &mut rng)?;
                    acceptance = Some(report.acceptance);
                    ce_loss = Some(report.ce_loss);
                    tset = refine_training_set(&tset, report.stage, config.policy)?;
                }
            }
            let metrics = StageMetrics {
                stage: k,
                loss: losses.last().copied().unwrap_or(f64::NAN),
                error,
                acceptance,
                ce_loss,
                samples,
                skipped: ratios.skipped,
            };
            let timings = StageTimings {
                stage: k,
                committor_seconds,
                sampler_seconds: t1.elapsed().as_secs_f64(),
            };
            Ok((metrics, timings))
        })()
        .map_err(|e| DastrError::Stage {
            stage: k,
            source: Box::new(e),
        })?;
        if let Some(cb) = options.on_stage {
            cb(&stage.0);
        }
        progress.metrics.push(stage.0);
        progress.timings.push(stage.1);
        progress.completed = k + 1;
        if let Some(dir) = &options.checkpoint_dir {
            save_stage(dir, k, &net, &opt, &tset, sampler.as_deref(), &progress).map_err(|e| DastrError::Stage {
                stage: k,
                source: Box::new(e),
            })?;
        }
        if options.stop_after == Some(k + 1) {
            break;
        }
    }
    Ok(DastrOutcome {
        net,
        tset,
        metrics: progress.metrics,
        timings: progress.timings,
    })
}

fn save_stage(
    dir: &Path,
    k: usize,
    net: &CommittorNet,
    opt: &Adam,
    tset: &StagedTrainingSet,
    sampler: Option<&dyn AdaptiveSampler>,
    progress: &Progress,
) -> Result<()> {
    let ck = net.to_checkpoint();
    ck.save(&dir.join(format!("net-stage{k}.json")))?;
    ck.save(&dir.join("net.json"))?;
    save_json(&dir.join("adam.json"), opt)?;
    save_json(&dir.join("training-set.json"), tset)?;
    if let Some(s) = sampler {
        s.save(dir)?;
    }
    // written last: its presence marks the stage as complete
    save_json(&dir.join("progress.json"), progress)
}

pub(crate) fn save_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let bytes = serde_json::to_vec(value).map_err(crate::checkpoint::CheckpointError::from)?;
    write_atomic(path, &bytes).map_err(|e| DastrError::Io {
        what: format!("writing {}", path.display()),
        source: e,
    })
}

pub(crate) fn load_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = std::fs::read(path).map_err(|e| DastrError::Io {
        what: format!("reading {}", path.display()),
        source: e,
    })?;
    Ok(serde_json::from_slice(&bytes).map_err(crate::checkpoint::CheckpointError::from)?)
}
