//! Adaptive sampling through a frozen autoencoder.
//!
//! An autoencoder trained once on the initial data supplies latent
//! coordinates `s = encode(x)`. A flow on a box in latent space is fit to
//! `|∇q|² e^{-βV}` evaluated at `decode(s)`, new latents are drawn from it,
//! decoded, and kept only when their energy is at most a threshold.

use std::cell::Cell;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::RngCore;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{Tape, Tensor};
use crate::checkpoint::{param_hash, Checkpoint, Parameterized};
use crate::dastr::{
    sampling_density_unnorm, AdaptiveSampler, DastrError, SamplerReport, Stage, StagedTrainingSet,
};
use crate::eval::Histogram;
use crate::flow::{importance_weights, train_flow_weighted, CeConfig, FlowModel};
use crate::nets::{Activation, Autoencoder, CommittorNet, NetError};
use crate::optim::Adam;
use crate::potentials::{BoxDomain, Potential};

#[derive(Debug, Error)]
pub enum LatentError {
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Autodiff(#[from] crate::autodiff::AutodiffError),
    #[error("autoencoder loss became {loss} in epoch {epoch}")]
    Diverged { epoch: usize, loss: f64 },
    #[error("no decoded sample has energy <= {threshold}; energies: {histogram:?}")]
    NothingAccepted { threshold: f64, histogram: Histogram },
    #[error("energy filter kept {accepted} of {candidates} decoded samples, below {min}")]
    LowAcceptance {
        accepted: usize,
        candidates: usize,
        min: f64,
        histogram: Histogram,
    },
    #[error("autoencoder parameters changed: {before} -> {after}")]
    AutoencoderChanged { before: String, after: String },
    #[error("latent sample {0} is not finite")]
    NonFinite(usize),
    #[error("invalid argument: {0}")]
    Invalid(String),
}

impl From<LatentError> for DastrError {
    fn from(e: LatentError) -> Self {
        match e {
            LatentError::Net(e) => DastrError::Net(e),
            LatentError::Autodiff(e) => DastrError::Autodiff(e),
            other => DastrError::Sampler(Box::new(other)),
        }
    }
}

pub type Result<T> = std::result::Result<T, LatentError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AeTraining {
    /// Hidden widths of the encoder; the decoder mirrors them.
    pub hidden: Vec<usize>,
    pub latent_dim: usize,
    pub activation: Activation,
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
}

/// Trains an autoencoder on the rows of `data` by mean squared
/// reconstruction error. Returns the network and the MSE over all of `data`.
pub fn train_autoencoder(data: &Tensor, cfg: &AeTraining, rng: &mut dyn RngCore) -> Result<(Autoencoder, f64)> {
    let n = data.rows();
    if n == 0 || data.rank() != 2 {
        return Err(LatentError::Invalid("empty training data".into()));
    }
    let dim = data.cols();
    if cfg.latent_dim == 0 || cfg.latent_dim > dim || cfg.batch == 0 {
        return Err(LatentError::Invalid(format!(
            "latent dimension {} for inputs of dimension {dim}, batch {}",
            cfg.latent_dim, cfg.batch
        )));
    }
    let mut enc = vec![dim];
    enc.extend(&cfg.hidden);
    enc.push(cfg.latent_dim);
    let dec: Vec<usize> = enc.iter().rev().copied().collect();
    let mut ae = Autoencoder::new(&enc, &dec, cfg.activation, rng)?;
    let mut opt = Adam::default();
    let mut order: Vec<usize> = (0..n).collect();
    for epoch in 0..cfg.epochs {
        order.shuffle(rng);
        for chunk in order.chunks(cfg.batch) {
            let x = data.gather_rows(chunk);
            let mut tape = Tape::new();
            let params = ae.bind(&mut tape);
            let xv = tape.constant(x.clone());
            let y = ae.apply(&mut tape, &params, xv)?;
            let neg = tape.constant(Tensor::new(x.shape().to_vec(), x.data().iter().map(|v| -v).collect())?);
            let diff = tape.add(y, neg)?;
            let sq = tape.square(diff);
            let loss = tape.mean(sq);
            let value = tape.value(loss).item()?;
            if !value.is_finite() {
                return Err(LatentError::Diverged { epoch, loss: value });
            }
            let grads = tape.grad_values(loss, &params)?;
            opt.step(cfg.lr, &mut ae.params_mut(), &grads);
        }
    }
    let mse = reconstruction_mse(&ae, data)?;
    if !mse.is_finite() {
        return Err(LatentError::Diverged { epoch: cfg.epochs, loss: mse });
    }
    Ok((ae, mse))
}

/// Mean squared error of `decode(encode(x))` over all entries.
pub fn reconstruction_mse(ae: &Autoencoder, data: &Tensor) -> Result<f64> {
    let y = ae.decode(&ae.encode(data)?)?;
    let n = data.numel().max(1) as f64;
    Ok(y.data().iter().zip(data.data()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / n)
}

/// An autoencoder whose encoder and decoder are both the identity on `R^d`.
pub fn identity_autoencoder(dim: usize) -> Result<Autoencoder> {
    let mut ae = Autoencoder::new(&[dim, dim], &[dim, dim], Activation::Identity, &mut crate::rng::seeded(0))?;
    for t in ae.params_mut() {
        let square = t.rank() == 2 && t.rows() == t.cols();
        let cols = if t.rank() == 2 { t.cols() } else { 0 };
        for (k, v) in t.data_mut().iter_mut().enumerate() {
            *v = if square && k / cols == k % cols { 1.0 } else { 0.0 };
        }
    }
    Ok(ae)
}

/// Cross-entropy weights for a latent flow:
/// `p_{V,q}(decode(encode(x_i))) / p_prev(x_i)`, self-normalized.
///
/// `log_proposal[i]` is the log-density the point was drawn from. Returns the
/// weights, the encoded points and the number of dropped (non-finite or
/// negative) weights.
pub fn latent_ce_weights(
    ae: &Autoencoder,
    net: &CommittorNet,
    p: &dyn Potential,
    x: &Tensor,
    log_proposal: &[f64],
    max_rejected: f64,
) -> std::result::Result<(Vec<f64>, Tensor, usize), DastrError> {
    let s = ae.encode(x).map_err(LatentError::from)?;
    let xh = ae.decode(&s).map_err(LatentError::from)?;
    let target = sampling_density_unnorm(net, p, None, &xh)?;
    let (w, rejected) = importance_weights(&target, log_proposal, max_rejected)?;
    Ok((w, s, rejected))
}

/// Decoded samples that passed the energy filter.
#[derive(Debug, Clone)]
pub struct Filtered {
    pub x: Tensor,
    /// Rows of the input that were kept.
    pub kept: Vec<usize>,
    pub acceptance: f64,
}

/// Decodes `s` and keeps the points with `V ≤ threshold`.
pub fn decode_and_filter(ae: &Autoencoder, p: &dyn Potential, s: &Tensor, threshold: f64) -> Result<Filtered> {
    if let Some(i) = (0..s.rows()).find(|&i| s.row_slice(i).iter().any(|v| !v.is_finite())) {
        return Err(LatentError::NonFinite(i));
    }
    let x = ae.decode(s)?;
    let energies: Vec<f64> = x.iter_rows().map(|r| p.energy(r)).collect();
    let kept: Vec<usize> = (0..energies.len()).filter(|&i| energies[i] <= threshold).collect();
    if kept.is_empty() && !energies.is_empty() {
        return Err(LatentError::NothingAccepted {
            threshold,
            histogram: energy_histogram(&energies),
        });
    }
    Ok(Filtered {
        acceptance: kept.len() as f64 / energies.len().max(1) as f64,
        x: x.gather_rows(&kept),
        kept,
    })
}

fn energy_histogram(energies: &[f64]) -> Histogram {
    let finite: Vec<f64> = energies.iter().copied().filter(|v| v.is_finite()).collect();
    let lo = finite.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = finite.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let (lo, hi) = if lo < hi { (lo, hi) } else if lo.is_finite() { (lo - 0.5, lo + 0.5) } else { (0.0, 1.0) };
    Histogram::new(&finite, 20, lo, hi).expect("valid range")
}

/// A box around the encoded points, widened by `margin` times its extent on
/// every side.
pub fn latent_box(s: &Tensor, margin: f64) -> std::result::Result<BoxDomain, DastrError> {
    let k = s.cols();
    let mut lo = vec![f64::INFINITY; k];
    let mut hi = vec![f64::NEG_INFINITY; k];
    for r in s.iter_rows() {
        for j in 0..k {
            lo[j] = lo[j].min(r[j]);
            hi[j] = hi[j].max(r[j]);
        }
    }
    for j in 0..k {
        let w = (hi[j] - lo[j]).max(1e-6);
        lo[j] -= margin * w;
        hi[j] += margin * w;
    }
    Ok(BoxDomain::new(lo, hi)?)
}

/// Adaptive sampler in the latent space of a frozen autoencoder.
pub struct LatentSampler {
    pub ae: Autoencoder,
    ae_hash: String,
    pub flow: FlowModel,
    pub opt: Adam,
    pub training: CeConfig,
    pub new_samples: usize,
    /// Largest accepted energy, in the units of `V`.
    pub threshold: f64,
    /// Smallest tolerated energy-filter acceptance.
    pub min_acceptance: f64,
}

impl LatentSampler {
    pub fn new(
        ae: Autoencoder,
        flow: FlowModel,
        training: CeConfig,
        new_samples: usize,
        threshold: f64,
        min_acceptance: f64,
    ) -> std::result::Result<Self, DastrError> {
        if flow.dim() != ae.latent_dim() {
            return Err(DastrError::Invalid(format!(
                "flow dimension {} for latent dimension {}",
                flow.dim(),
                ae.latent_dim()
            )));
        }
        Ok(Self {
            ae_hash: param_hash(&ae),
            ae,
            flow,
            opt: Adam::default(),
            training,
            new_samples,
            threshold,
            min_acceptance,
        })
    }

    pub fn ae_hash(&self) -> &str {
        &self.ae_hash
    }

    fn check_frozen(&self) -> Result<()> {
        let now = param_hash(&self.ae);
        if now != self.ae_hash {
            return Err(LatentError::AutoencoderChanged {
                before: self.ae_hash.clone(),
                after: now,
            });
        }
        Ok(())
    }
}

impl AdaptiveSampler for LatentSampler {
    fn refine(
        &mut self,
        p: &dyn Potential,
        net: &CommittorNet,
        tset: &StagedTrainingSet,
        rng: &mut dyn RngCore,
    ) -> std::result::Result<SamplerReport, DastrError> {
        self.check_frozen()?;
        let x = tset.samples();
        let (w, s, _) = latent_ce_weights(&self.ae, net, p, &x, &tset.log_densities(), self.training.max_rejected)?;
        // encoded points outside the flow's box carry no density
        let inside: Vec<usize> = (0..s.rows())
            .filter(|&i| self.flow.domain().strictly_contains(s.row_slice(i)))
            .collect();
        let sum: f64 = inside.iter().map(|&i| w[i]).sum();
        if !(sum > 0.0) {
            return Err(DastrError::Invalid("no encoded training point lies in the latent box".into()));
        }
        let wk: Vec<f64> = if inside.len() == s.rows() {
            w
        } else {
            inside.iter().map(|&i| w[i] / sum).collect()
        };
        let losses = train_flow_weighted(&mut self.flow, &s.gather_rows(&inside), &wk, &self.training, &mut self.opt, rng)?;

        let candidates = Cell::new(0usize);
        let accepted = Cell::new(0usize);
        let mut energies = Vec::new();
        let (ae, domain, thr) = (&self.ae, self.flow.domain().clone(), self.threshold);
        let drawn = self.flow.sample_filtered_batch(
            self.new_samples,
            rng,
            |sb| {
                let xb = ae.decode(sb).expect("decoder matches latent dimension");
                sb.iter_rows()
                    .zip(xb.iter_rows())
                    .map(|(sr, xr)| {
                        if !(domain.strictly_contains(sr) && p.domain().strictly_contains(xr) && !p.in_ab(xr)) {
                            return false;
                        }
                        candidates.set(candidates.get() + 1);
                        let v = p.energy(xr);
                        energies.push(v);
                        let ok = v <= thr;
                        if ok {
                            accepted.set(accepted.get() + 1);
                        }
                        ok
                    })
                    .collect()
            },
            100,
        );
        let acceptance = accepted.get() as f64 / candidates.get().max(1) as f64;
        if acceptance < self.min_acceptance {
            return Err(LatentError::LowAcceptance {
                accepted: accepted.get(),
                candidates: candidates.get(),
                min: self.min_acceptance,
                histogram: energy_histogram(&energies),
            }
            .into());
        }
        let (latent, drawn) = drawn?;
        let new_x = self.ae.decode(&latent).map_err(LatentError::from)?;
        // density of the latent flow conditioned on acceptance
        let shift = (self.new_samples as f64 / drawn.max(1) as f64).ln();
        let ld = self.flow.log_density(&latent)?.into_iter().map(|v| v - shift).collect();
        self.check_frozen()?;
        Ok(SamplerReport {
            stage: Stage::new(new_x, ld)?,
            acceptance,
            ce_loss: losses.last().copied().unwrap_or(f64::NAN),
        })
    }

    fn save(&self, dir: &Path) -> std::result::Result<(), DastrError> {
        self.ae.to_checkpoint().save(&dir.join("autoencoder.json"))?;
        self.flow.to_checkpoint().save(&dir.join("latent-flow.json"))?;
        crate::dastr::save_json(&dir.join("latent-flow-adam.json"), &self.opt)
    }

    fn load(&mut self, dir: &Path) -> std::result::Result<(), DastrError> {
        let ae = Autoencoder::from_checkpoint(&Checkpoint::load(&dir.join("autoencoder.json"))?)?;
        if param_hash(&ae) != self.ae_hash {
            return Err(LatentError::AutoencoderChanged {
                before: self.ae_hash.clone(),
                after: param_hash(&ae),
            }
            .into());
        }
        self.flow = FlowModel::from_checkpoint(&Checkpoint::load(&dir.join("latent-flow.json"))?)?;
        self.opt = crate::dastr::load_json(&dir.join("latent-flow-adam.json"))?;
        Ok(())
    }
}

#[cfg(test)]
mod tests;
