use rand::RngCore;
use serde::{Deserialize, Serialize};

use super::{DastrError, Result, StagedTrainingSet};
use crate::autodiff::{Tape, Tensor, Var};
use crate::nets::{input_gradient, value_and_input_grad, CommittorModel};
use crate::potentials::{Potential, Set};
use crate::sde::Bias;

/// How a minibatch combines points from different stages.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum IsMode {
    /// `Σ_j α_j · mean over the batch's stage-j points`, with `α` renormalized
    /// over the stages present in the batch.
    #[default]
    AsPrinted,
    /// Plain mean over the batch.
    Pooled,
}

/// Per-point ratios `e^{-βV(x)} / p_j(x)` of a training set.
#[derive(Debug, Clone, PartialEq)]
pub struct IsRatios {
    pub ratio: Vec<f64>,
    pub stage: Vec<usize>,
    pub alphas: Vec<f64>,
    /// Indices with a finite ratio.
    pub valid: Vec<usize>,
    pub skipped: usize,
}

/// Importance ratios for every point; aborts when more than `max_skipped`
/// of them are not finite.
pub fn is_ratios(tset: &StagedTrainingSet, p: &dyn Potential, max_skipped: f64) -> Result<IsRatios> {
    let beta = p.beta();
    let mut ratio = Vec::with_capacity(tset.len());
    for s in tset.stages() {
        for i in 0..s.len() {
            ratio.push((-beta * p.energy(s.row(i)) - s.log_density[i]).exp());
        }
    }
    let valid: Vec<usize> = (0..ratio.len()).filter(|&i| ratio[i].is_finite()).collect();
    let skipped = ratio.len() - valid.len();
    if skipped as f64 > max_skipped * ratio.len() as f64 {
        return Err(DastrError::TooManySkipped {
            skipped,
            total: ratio.len(),
        });
    }
    Ok(IsRatios {
        ratio,
        stage: tset.stage_index(),
        alphas: tset.alphas(),
        valid,
        skipped,
    })
}

impl IsRatios {
    /// Coefficient of each batch point's `|∇q|²` in the interior term.
    pub fn batch_coefficients(&self, batch: &[usize], mode: IsMode) -> Vec<f64> {
        match mode {
            IsMode::Pooled => {
                let b = batch.len() as f64;
                batch.iter().map(|&i| self.ratio[i] / b).collect()
            }
            IsMode::AsPrinted => {
                let mut counts = vec![0usize; self.alphas.len()];
                for &i in batch {
                    counts[self.stage[i]] += 1;
                }
                let present: f64 = counts
                    .iter()
                    .zip(&self.alphas)
                    .filter(|(c, _)| **c > 0)
                    .map(|(_, a)| a)
                    .sum();
                batch
                    .iter()
                    .map(|&i| {
                        let j = self.stage[i];
                        self.alphas[j] / present * self.ratio[i] / counts[j] as f64
                    })
                    .collect()
            }
        }
    }
}

/// Fixed boundary points on `∂A` and `∂B`.
#[derive(Debug, Clone, PartialEq)]
pub struct BoundarySet {
    pub a: Tensor,
    pub b: Tensor,
}

impl BoundarySet {
    pub fn sample(p: &dyn Potential, n_a: usize, n_b: usize, rng: &mut dyn RngCore) -> Self {
        Self {
            a: p.sample_set(Set::A, n_a, rng),
            b: p.sample_set(Set::B, n_b, rng),
        }
    }
}

/// Records the loss
///
/// ```text
/// Σ_i c_i |∇q(x_i)|² + λ (mean_A q² + mean_B (1 - q)²)
/// ```
///
/// as a scalar node. Empty boundary tensors drop their term.
#[allow(clippy::too_many_arguments)]
pub fn variational_loss<M: CommittorModel + ?Sized>(
    model: &M,
    tape: &mut Tape,
    params: &[Var],
    x: &Tensor,
    coef: &[f64],
    boundary_a: &Tensor,
    boundary_b: &Tensor,
    lambda: f64,
) -> Result<Var> {
    if coef.len() != x.rows() {
        return Err(DastrError::Invalid(format!("{} coefficients for {} points", coef.len(), x.rows())));
    }
    let (_, g) = value_and_input_grad(model, tape, params, x)?;
    let g2 = tape.square(g);
    let per_row = tape.sum_cols(g2)?;
    let c = tape.constant(Tensor::column(coef.to_vec()));
    let weighted = tape.mul(per_row, c)?;
    let mut loss = tape.sum(weighted);
    if boundary_a.rows() > 0 {
        let xa = tape.constant(boundary_a.clone());
        let qa = model.apply(tape, params, xa)?;
        let sq = tape.square(qa);
        let m = tape.mean(sq);
        let t = tape.scale(m, lambda);
        loss = tape.add(loss, t)?;
    }
    if boundary_b.rows() > 0 {
        let xb = tape.constant(boundary_b.clone());
        let qb = model.apply(tape, params, xb)?;
        let d = tape.shift(qb, -1.0);
        let sq = tape.square(d);
        let m = tape.mean(sq);
        let t = tape.scale(m, lambda);
        loss = tape.add(loss, t)?;
    }
    Ok(loss)
}

/// `|∇q(x)|² e^{-β(V(x) + V_bias(x))}` per row.
pub fn sampling_density_unnorm<M: CommittorModel + ?Sized>(
    model: &M,
    p: &dyn Potential,
    bias: Option<&dyn Bias>,
    x: &Tensor,
) -> Result<Vec<f64>> {
    let g = input_gradient(model, x)?;
    let beta = p.beta();
    Ok(x.iter_rows()
        .zip(g.iter_rows())
        .map(|(r, gr)| {
            let v = p.energy(r) + bias.map_or(0.0, |b| b.value(r));
            gr.iter().map(|v| v * v).sum::<f64>() * (-beta * v).exp()
        })
        .collect())
}
