//! Error metrics, a trajectory-counting committor oracle and histograms.

use rand::RngCore;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::Tensor;
use crate::nets::{CommittorModel, NetError};
use crate::potentials::{BrownianAnnulus, Potential, PotentialError};
use crate::rng;
use crate::sde::{first_hit, Hit, Integrator, SdeError};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("reference has zero norm")]
    ZeroReference,
    #[error("length mismatch: {0} vs {1}")]
    Length(usize, usize),
    #[error("no point satisfies |q - 0.5| <= {tol}; try a larger tolerance")]
    EmptyIsosurface { tol: f64 },
    #[error("empty input")]
    Empty,
    #[error("point {index}: {source}")]
    Point {
        index: usize,
        #[source]
        source: SdeError,
    },
    #[error(transparent)]
    Sde(#[from] SdeError),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Potential(#[from] PotentialError),
    #[error("invalid argument: {0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, EvalError>;

/// `‖q - q_ref‖₂ / ‖q_ref‖₂`.
pub fn relative_l2(q: &[f64], q_ref: &[f64]) -> Result<f64> {
    if q.len() != q_ref.len() {
        return Err(EvalError::Length(q.len(), q_ref.len()));
    }
    let den: f64 = q_ref.iter().map(|v| v * v).sum::<f64>();
    if den == 0.0 {
        return Err(EvalError::ZeroReference);
    }
    let num: f64 = q.iter().zip(q_ref).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok((num / den).sqrt())
}

/// Settings of the trajectory-counting committor estimate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct McConfig {
    pub n_traj: usize,
    pub dt: f64,
    pub max_steps: u64,
    /// Worker threads; 0 uses the rayon default. Results do not depend on it.
    #[serde(default)]
    pub threads: usize,
}

impl Default for McConfig {
    fn default() -> Self {
        Self {
            n_traj: 200,
            dt: 1e-5,
            max_steps: 2_000_000,
            threads: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct McEstimate {
    /// Fraction of finished trajectories that reached `B` first; NaN when
    /// every trajectory timed out.
    pub value: f64,
    /// Binomial standard error of `value`.
    pub se: f64,
    pub hits_a: usize,
    pub hits_b: usize,
    pub timeouts: usize,
}

impl McEstimate {
    fn from_counts(hits_a: usize, hits_b: usize, timeouts: usize) -> Self {
        let n = hits_a + hits_b;
        let (value, se) = if n == 0 {
            (f64::NAN, f64::NAN)
        } else {
            let v = hits_b as f64 / n as f64;
            (v, (v * (1.0 - v) / n as f64).sqrt())
        };
        Self {
            value,
            se,
            hits_a,
            hits_b,
            timeouts,
        }
    }

    pub fn all_timeout(&self) -> bool {
        self.hits_a + self.hits_b == 0
    }
}

pub(crate) fn with_threads<T: Send>(threads: usize, f: impl FnOnce() -> T + Send) -> T {
    if threads == 0 {
        return f();
    }
    match rayon::ThreadPoolBuilder::new().num_threads(threads).build() {
        Ok(pool) => pool.install(f),
        Err(_) => f(),
    }
}

/// Runs `n_traj` trajectories from every row of `points` until they hit `A`
/// or `B`. Trajectory `t` of point `i` uses its own random stream, so the
/// result is the same for any thread count.
pub fn mc_committor(p: &dyn Potential, points: &Tensor, cfg: &McConfig, seed: u64) -> Result<Vec<McEstimate>> {
    if cfg.n_traj == 0 || cfg.max_steps == 0 {
        return Err(EvalError::Invalid("n_traj and max_steps must be positive".into()));
    }
    let integ = Integrator::new(cfg.dt, p.beta())?;
    let n_traj = cfg.n_traj as u64;
    let run_point = |i: usize| -> Result<McEstimate> {
        let x0 = points.row_slice(i);
        let (mut a, mut b, mut t_out) = (0, 0, 0);
        for t in 0..n_traj {
            let mut r = rng::substream(seed, i as u64 * n_traj + t);
            let hit = first_hit(p, x0, integ, cfg.max_steps, &mut r as &mut dyn RngCore)
                .map_err(|source| EvalError::Point { index: i, source })?;
            match hit {
                Hit::A => a += 1,
                Hit::B => b += 1,
                Hit::Timeout => t_out += 1,
            }
        }
        Ok(McEstimate::from_counts(a, b, t_out))
    };
    with_threads(cfg.threads, || (0..points.rows()).into_par_iter().map(run_point).collect())
}

/// `n` points `(κ, …, κ)` with `κ` evenly spaced in `[a/√d, b/√d]`.
pub fn validation_curve(dim: usize, inner: f64, outer: f64, n: usize) -> Tensor {
    let s = (dim as f64).sqrt();
    let (k0, k1) = (inner / s, outer / s);
    let mut data = Vec::with_capacity(n * dim);
    for i in 0..n {
        let t = if n > 1 { i as f64 / (n - 1) as f64 } else { 0.5 };
        let k = k0 + t * (k1 - k0);
        data.extend(std::iter::repeat_n(k, dim));
    }
    Tensor::new(vec![n, dim], data).expect("curve shape")
}

/// Relative L² error of `model` against the closed-form annulus committor on
/// the `n`-point validation curve.
pub fn curve_error<M: CommittorModel + ?Sized>(model: &M, p: &BrownianAnnulus, n: usize) -> Result<f64> {
    let x = validation_curve(p.dim(), p.inner(), p.outer(), n);
    let q = model.values(&x)?;
    let r = p.reference_committor_batch(&x)?;
    relative_l2(&q, &r)
}

/// Bin edges and counts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub edges: Vec<f64>,
    pub counts: Vec<u64>,
}

impl Histogram {
    /// `bins` equal bins on `[lo, hi]`. Values outside go to the end bins;
    /// NaN values are not counted.
    pub fn new(values: &[f64], bins: usize, lo: f64, hi: f64) -> Result<Self> {
        if bins == 0 || !(lo < hi) {
            return Err(EvalError::Invalid(format!("{bins} bins on [{lo}, {hi}]")));
        }
        let w = (hi - lo) / bins as f64;
        let edges = (0..=bins).map(|i| lo + i as f64 * w).collect();
        let mut counts = vec![0u64; bins];
        for &v in values.iter().filter(|v| !v.is_nan()) {
            let k = ((v - lo) / w).floor().clamp(0.0, (bins - 1) as f64) as usize;
            counts[k] += 1;
        }
        Ok(Self { edges, counts })
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Fraction of the total in bins lying entirely within `[lo, hi]`.
    pub fn fraction_between(&self, lo: f64, hi: f64) -> f64 {
        let eps = 1e-12 * (self.edges[self.edges.len() - 1] - self.edges[0]);
        let inside: u64 = self
            .counts
            .iter()
            .enumerate()
            .filter(|(k, _)| self.edges[*k] >= lo - eps && self.edges[k + 1] <= hi + eps)
            .map(|(_, c)| c)
            .sum();
        match self.total() {
            0 => 0.0,
            t => inside as f64 / t as f64,
        }
    }
}

/// Histogram of the Euclidean norms of the rows of `samples`.
pub fn norm_histogram(samples: &Tensor, bins: usize, lo: f64, hi: f64) -> Result<Histogram> {
    let norms: Vec<f64> = samples
        .iter_rows()
        .map(|r| r.iter().map(|v| v * v).sum::<f64>().sqrt())
        .collect();
    Histogram::new(&norms, bins, lo, hi)
}

/// Rows of `pool` with `|q(x) - 0.5| ≤ tol`.
pub fn extract_isosurface<M: CommittorModel + ?Sized>(model: &M, pool: &Tensor, tol: f64) -> Result<Tensor> {
    if pool.rows() == 0 {
        return Err(EvalError::Empty);
    }
    let q = model.values(pool)?;
    let keep: Vec<usize> = (0..q.len()).filter(|&i| (q[i] - 0.5).abs() <= tol).collect();
    if keep.is_empty() {
        return Err(EvalError::EmptyIsosurface { tol });
    }
    Ok(pool.gather_rows(&keep))
}

/// Candidate points near `q = 0.5`: uniform interior points are paired across
/// the level set and each segment is bisected until `|q - 0.5| ≤ tol` or
/// `max_iter` halvings. Returns at most `n` points outside `A ∪ B`.
pub fn isosurface_candidates<M: CommittorModel + ?Sized>(
    model: &M,
    p: &dyn Potential,
    n: usize,
    tol: f64,
    rng: &mut dyn RngCore,
) -> Result<Tensor> {
    let d = p.dim();
    let mut out: Vec<f64> = Vec::with_capacity(n * d);
    for _round in 0..20 {
        let found = out.len() / d;
        if found >= n {
            break;
        }
        let pool = crate::potentials::sample_interior(p, 4 * n.max(16), rng);
        out.extend(bisect_pairs(model, p, &pool, n - found, tol)?);
    }
    finish_candidates(out, d, tol)
}

/// As [`isosurface_candidates`], with segment endpoints taken from the rows
/// of `pool` in order instead of uniform draws.
pub fn isosurface_candidates_in<M: CommittorModel + ?Sized>(
    model: &M,
    p: &dyn Potential,
    pool: &Tensor,
    n: usize,
    tol: f64,
) -> Result<Tensor> {
    if pool.rows() == 0 {
        return Err(EvalError::Empty);
    }
    finish_candidates(bisect_pairs(model, p, pool, n, tol)?, p.dim(), tol)
}

fn finish_candidates(out: Vec<f64>, d: usize, tol: f64) -> Result<Tensor> {
    if out.is_empty() {
        return Err(EvalError::EmptyIsosurface { tol });
    }
    Ok(Tensor::new(vec![out.len() / d, d], out).expect("candidate shape"))
}

/// Bisects segments between pool points on either side of `q = 0.5`;
/// returns up to `n` converged midpoints outside `A ∪ B`, flattened.
fn bisect_pairs<M: CommittorModel + ?Sized>(
    model: &M,
    p: &dyn Potential,
    pool: &Tensor,
    n: usize,
    tol: f64,
) -> Result<Vec<f64>> {
    let d = p.dim();
    let max_iter = 60;
    let q = model.values(pool)?;
    let below: Vec<usize> = (0..q.len()).filter(|&i| q[i] < 0.5).collect();
    let above: Vec<usize> = (0..q.len()).filter(|&i| q[i] >= 0.5).collect();
    let pairs = below.len().min(above.len());
    let mut out = Vec::new();
    if pairs == 0 {
        return Ok(out);
    }
    let mut lo: Vec<f64> = below[..pairs].iter().flat_map(|&i| pool.row_slice(i).to_vec()).collect();
    let mut hi: Vec<f64> = above[..pairs].iter().flat_map(|&i| pool.row_slice(i).to_vec()).collect();
    let mut mid = vec![0.0; pairs * d];
    let mut qm = vec![f64::NAN; pairs];
    for _ in 0..max_iter {
        for k in 0..pairs * d {
            mid[k] = 0.5 * (lo[k] + hi[k]);
        }
        qm = model.values(&Tensor::new(vec![pairs, d], mid.clone()).expect("mid shape"))?;
        if qm.iter().all(|v| (v - 0.5).abs() <= tol) {
            break;
        }
        for (j, &v) in qm.iter().enumerate() {
            let side = if v < 0.5 { &mut lo } else { &mut hi };
            side[j * d..(j + 1) * d].copy_from_slice(&mid[j * d..(j + 1) * d]);
        }
    }
    let mut found = 0;
    for j in 0..pairs {
        let x = &mid[j * d..(j + 1) * d];
        if found < n && (qm[j] - 0.5).abs() <= tol && !p.in_ab(x) {
            out.extend_from_slice(x);
            found += 1;
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IsosurfaceReport {
    /// Number of pool points within the tolerance.
    pub gamma_size: usize,
    /// Points that were simulated.
    pub points: usize,
    pub estimates: Vec<McEstimate>,
    /// Mean and sample SD of the finished estimates.
    pub mean: f64,
    pub sd: f64,
    /// Points where every trajectory timed out.
    pub flagged: usize,
    pub histogram: Histogram,
}

/// Extracts `Γ` from `pool`, runs the oracle on up to `max_points` of its
/// members (those closest to `q = 0.5`) and summarizes the estimates.
#[allow(clippy::too_many_arguments)]
pub fn isosurface_histogram<M: CommittorModel + ?Sized>(
    model: &M,
    p: &dyn Potential,
    pool: &Tensor,
    tol: f64,
    max_points: usize,
    mc: &McConfig,
    bins: usize,
    seed: u64,
) -> Result<IsosurfaceReport> {
    let gamma = extract_isosurface(model, pool, tol)?;
    let q = model.values(&gamma)?;
    let mut order: Vec<usize> = (0..q.len()).collect();
    order.sort_by(|&i, &j| (q[i] - 0.5).abs().total_cmp(&(q[j] - 0.5).abs()).then(i.cmp(&j)));
    order.truncate(max_points);
    order.sort_unstable();
    let pts = gamma.gather_rows(&order);
    let estimates = mc_committor(p, &pts, mc, seed)?;
    let values: Vec<f64> = estimates.iter().filter(|e| !e.all_timeout()).map(|e| e.value).collect();
    let (mean, sd) = mean_sd(&values);
    Ok(IsosurfaceReport {
        gamma_size: gamma.rows(),
        points: pts.rows(),
        flagged: estimates.len() - values.len(),
        histogram: Histogram::new(&values, bins, 0.0, 1.0)?,
        estimates,
        mean,
        sd,
    })
}

/// Mean and sample standard deviation; SD is NaN for fewer than two values.
pub fn mean_sd(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, f64::NAN);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

#[cfg(test)]
mod tests;
