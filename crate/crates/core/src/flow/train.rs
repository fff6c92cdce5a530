use rand::seq::SliceRandom;
use rand::RngCore;
use serde::{Deserialize, Serialize};

use super::{FlowError, FlowModel, Result};
use crate::autodiff::{Tape, Tensor};
use crate::checkpoint::Parameterized;
use crate::optim::Adam;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CeConfig {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    /// Largest tolerated fraction of non-finite importance weights.
    #[serde(default = "default_max_rejected")]
    pub max_rejected: f64,
}

fn default_max_rejected() -> f64 {
    0.1
}

impl Default for CeConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            batch: 5000,
            lr: 1e-3,
            max_rejected: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CeReport {
    /// Mean batch loss per epoch.
    pub losses: Vec<f64>,
    /// Samples dropped for a non-finite or negative weight.
    pub rejected: usize,
}

/// Self-normalized weights `w_i ∝ target_i / proposal_i`.
///
/// `target` holds unnormalized density values, not logs, so rescaling it by a
/// power of two leaves the result bit-identical. Entries that are not finite
/// or negative get weight zero and are counted.
pub fn importance_weights(target: &[f64], log_proposal: &[f64], max_rejected: f64) -> Result<(Vec<f64>, usize)> {
    if target.len() != log_proposal.len() {
        return Err(FlowError::Invalid(format!(
            "{} target values for {} proposal values",
            target.len(),
            log_proposal.len()
        )));
    }
    let finite: Vec<f64> = log_proposal.iter().copied().filter(|v| v.is_finite()).collect();
    let reference = if finite.is_empty() {
        0.0
    } else {
        finite.iter().sum::<f64>() / finite.len() as f64
    };
    let raw: Vec<f64> = target
        .iter()
        .zip(log_proposal)
        .map(|(t, lp)| t * (reference - lp).exp())
        .collect();
    normalize_weights(raw, max_rejected)
}

/// Zeros out bad entries of `raw` and scales the rest to sum to one.
pub fn normalize_weights(mut raw: Vec<f64>, max_rejected: f64) -> Result<(Vec<f64>, usize)> {
    let mut rejected = 0;
    for w in &mut raw {
        if !(w.is_finite() && *w >= 0.0) {
            *w = 0.0;
            rejected += 1;
        }
    }
    let total = raw.len();
    if rejected as f64 > max_rejected * total as f64 {
        return Err(FlowError::TooManyRejected { rejected, total });
    }
    let sum: f64 = raw.iter().sum();
    if !(sum > 0.0 && sum.is_finite()) {
        return Err(FlowError::TooManyRejected { rejected: total, total });
    }
    for w in &mut raw {
        *w /= sum;
    }
    Ok((raw, rejected))
}

/// Fits `flow` to the target by weighted cross-entropy
/// `-Σ_i w_i log p_flow(x_i)` over the samples.
pub fn train_flow_ce(
    flow: &mut FlowModel,
    samples: &Tensor,
    target: &[f64],
    log_proposal: &[f64],
    config: &CeConfig,
    opt: &mut Adam,
    rng: &mut dyn RngCore,
) -> Result<CeReport> {
    let (weights, rejected) = importance_weights(target, log_proposal, config.max_rejected)?;
    let losses = train_flow_weighted(flow, samples, &weights, config, opt, rng)?;
    Ok(CeReport { losses, rejected })
}

/// Cross-entropy fit with given normalized weights. Returns the mean batch
/// loss of each epoch.
pub fn train_flow_weighted(
    flow: &mut FlowModel,
    samples: &Tensor,
    weights: &[f64],
    config: &CeConfig,
    opt: &mut Adam,
    rng: &mut dyn RngCore,
) -> Result<Vec<f64>> {
    let n = samples.rows();
    if weights.len() != n {
        return Err(FlowError::Invalid(format!("{} weights for {n} samples", weights.len())));
    }
    if config.batch == 0 {
        return Err(FlowError::Invalid("batch size 0".into()));
    }
    let mut order: Vec<usize> = (0..n).collect();
    let mut losses = Vec::with_capacity(config.epochs);
    for _ in 0..config.epochs {
        order.shuffle(rng);
        let mut total = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(config.batch) {
            let x = samples.gather_rows(chunk);
            let c = Tensor::column(chunk.iter().map(|&i| -weights[i] * n as f64 / chunk.len() as f64).collect());
            let mut tape = Tape::new();
            let params = flow.bind(&mut tape);
            let lp = flow.log_density_on_tape(&mut tape, &params, &x)?;
            let cv = tape.constant(c);
            let prod = tape.mul(lp, cv)?;
            let loss = tape.sum(prod);
            let value = tape.value(loss).item()?;
            if !value.is_finite() {
                return Err(FlowError::Invalid(format!("non-finite cross-entropy {value}")));
            }
            let grads = tape.grad_values(loss, &params)?;
            opt.step(config.lr, &mut flow.params_mut(), &grads);
            total += value;
            batches += 1;
        }
        losses.push(total / batches.max(1) as f64);
    }
    Ok(losses)
}
