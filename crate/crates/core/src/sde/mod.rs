//! Overdamped Langevin dynamics `dX = -∇V dt + √(2/β) dW` by Euler–Maruyama,
//! with optional bias potentials.

mod bias;

pub use bias::{Bias, MetadynamicsBias, Projection, UmbrellaBias};

use std::fmt::Write as _;
use std::path::Path;

use rand::RngCore;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::Tensor;
use crate::potentials::{gaussian, Potential, Set};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SdeError {
    #[error("state became non-finite at step {step}")]
    NonFinite { step: u64 },
    #[error("start point lies in A or B")]
    StartsInSet,
    #[error("start point has dimension {got}, expected {expected}")]
    Dimension { expected: usize, got: usize },
    #[error("umbrella sampling kept {kept} of {wanted} points within {steps} steps (CV distance {distance:.4})")]
    NoConvergence {
        kept: usize,
        wanted: usize,
        steps: u64,
        distance: f64,
    },
    #[error("invalid parameter: {0}")]
    Invalid(String),
    #[error("io error: {0}")]
    Io(String),
}

pub type Result<T> = std::result::Result<T, SdeError>;

/// One Euler–Maruyama step size and temperature.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Integrator {
    pub dt: f64,
    pub beta: f64,
}

impl Integrator {
    pub fn new(dt: f64, beta: f64) -> Result<Self> {
        if !(dt > 0.0) || !(beta > 0.0) {
            return Err(SdeError::Invalid(format!("dt = {dt}, beta = {beta}")));
        }
        Ok(Self { dt, beta })
    }

    pub fn noise_scale(&self) -> f64 {
        (2.0 * self.dt / self.beta).sqrt()
    }

    /// Advances `x` without reflecting. Returns `V + bias` at the old point.
    pub fn step(
        &self,
        p: &dyn Potential,
        bias: Option<&dyn Bias>,
        x: &mut [f64],
        grad: &mut [f64],
        rng: &mut dyn RngCore,
    ) -> f64 {
        let mut e = p.energy_grad(x, grad);
        if let Some(b) = bias {
            e += b.value_grad(x, grad);
        }
        let s = self.noise_scale();
        for (xi, gi) in x.iter_mut().zip(grad.iter()) {
            *xi += -gi * self.dt + s * gaussian(rng);
        }
        e
    }
}

fn check_start(p: &dyn Potential, x0: &[f64]) -> Result<()> {
    if x0.len() != p.dim() {
        return Err(SdeError::Dimension {
            expected: p.dim(),
            got: x0.len(),
        });
    }
    Ok(())
}

fn finite(x: &[f64], step: u64) -> Result<()> {
    if x.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(SdeError::NonFinite { step })
    }
}

/// Recorded states every `stride` steps, starting with the initial state.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub stride: u64,
    pub steps: Vec<u64>,
    pub states: Tensor,
    pub energies: Vec<f64>,
    pub biases: Vec<f64>,
}

impl Trajectory {
    /// Rows that lie outside `A ∪ B`.
    pub fn outside_sets(&self, p: &dyn Potential) -> Tensor {
        let idx: Vec<usize> = (0..self.states.rows())
            .filter(|&i| !p.in_ab(self.states.row_slice(i)))
            .collect();
        self.states.gather_rows(&idx)
    }

    /// CSV with header `step,x0,..,x{d-1},V,bias`.
    pub fn to_csv(&self) -> String {
        let d = self.states.cols();
        let mut s = String::from("step");
        for i in 0..d {
            let _ = write!(s, ",x{i}");
        }
        s.push_str(",V,bias\n");
        for (k, row) in self.states.iter_rows().enumerate() {
            let _ = write!(s, "{}", self.steps[k]);
            for v in row {
                let _ = write!(s, ",{v}");
            }
            let _ = writeln!(s, ",{},{}", self.energies[k], self.biases[k]);
        }
        s
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| SdeError::Io(format!("{}: {e}", path.display())))
    }
}

/// Runs `steps` steps from `x0`, reflecting at the domain boundary.
pub fn simulate(
    p: &dyn Potential,
    bias: Option<&dyn Bias>,
    x0: &[f64],
    steps: u64,
    integ: Integrator,
    stride: u64,
    rng: &mut dyn RngCore,
) -> Result<Trajectory> {
    check_start(p, x0)?;
    if stride == 0 {
        return Err(SdeError::Invalid("stride must be positive".into()));
    }
    let d = p.dim();
    let mut x = x0.to_vec();
    let mut g = vec![0.0; d];
    let mut out = Trajectory {
        stride,
        steps: Vec::new(),
        states: Tensor::zeros(&[0, d]),
        energies: Vec::new(),
        biases: Vec::new(),
    };
    let mut rows = Vec::new();
    let mut record = |t: u64, x: &[f64], out: &mut Trajectory| {
        out.steps.push(t);
        rows.extend_from_slice(x);
        out.energies.push(p.energy(x));
        out.biases.push(bias.map_or(0.0, |b| b.value(x)));
    };
    record(0, &x, &mut out);
    for t in 1..=steps {
        integ.step(p, bias, &mut x, &mut g, rng);
        p.reflect(&mut x);
        finite(&x, t)?;
        if t % stride == 0 {
            record(t, &x, &mut out);
        }
    }
    let n = out.steps.len();
    out.states = Tensor::new(vec![n, d], rows).expect("shape matches");
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Hit {
    A,
    B,
    Timeout,
}

/// Runs until the path enters `A` or `B`. Membership is tested after each
/// step, before reflection, so no recording choice can hide an entry.
pub fn first_hit(p: &dyn Potential, x0: &[f64], integ: Integrator, max_steps: u64, rng: &mut dyn RngCore) -> Result<Hit> {
    check_start(p, x0)?;
    if p.in_ab(x0) {
        return Err(SdeError::StartsInSet);
    }
    let mut x = x0.to_vec();
    let mut g = vec![0.0; x.len()];
    for t in 1..=max_steps {
        integ.step(p, None, &mut x, &mut g, rng);
        finite(&x, t)?;
        if p.in_set(Set::A, &x) {
            return Ok(Hit::A);
        }
        if p.in_set(Set::B, &x) {
            return Ok(Hit::B);
        }
        p.reflect(&mut x);
    }
    Ok(Hit::Timeout)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetadynamicsParams {
    /// Hill height `w`.
    pub height: f64,
    /// Hill width `σ` in CV units.
    pub width: f64,
    /// Steps between deposits `τ`.
    pub interval: u64,
    pub max_deposits: usize,
}

#[derive(Debug, Clone)]
pub struct MetadynamicsRun {
    /// Recorded states outside `A ∪ B`.
    pub samples: Tensor,
    pub energies: Vec<f64>,
    /// The final bias evaluated at each sample.
    pub final_bias: Vec<f64>,
    pub bias: MetadynamicsBias,
}

/// Simulates `steps` steps, depositing a hill every `interval` steps at the
/// current CV value. Samples are recorded every `stride` steps.
#[allow(clippy::too_many_arguments)]
pub fn metadynamics_run(
    p: &dyn Potential,
    cv: Projection,
    params: MetadynamicsParams,
    x0: &[f64],
    steps: u64,
    integ: Integrator,
    stride: u64,
    rng: &mut dyn RngCore,
) -> Result<MetadynamicsRun> {
    check_start(p, x0)?;
    if params.interval == 0 || stride == 0 || !(params.width > 0.0) || params.height < 0.0 {
        return Err(SdeError::Invalid(format!("{params:?}, stride {stride}")));
    }
    let d = p.dim();
    let mut bias = MetadynamicsBias::new(cv, params.height, params.width);
    let mut x = x0.to_vec();
    let mut g = vec![0.0; d];
    let mut rows = Vec::new();
    for t in 1..=steps {
        integ.step(p, Some(&bias), &mut x, &mut g, rng);
        p.reflect(&mut x);
        finite(&x, t)?;
        if t % stride == 0 && !p.in_ab(&x) {
            rows.extend_from_slice(&x);
        }
        if t % params.interval == 0 && bias.deposits().len() < params.max_deposits {
            bias.deposit(&x);
        }
    }
    let samples = Tensor::new(vec![rows.len() / d, d], rows).expect("shape matches");
    let energies = samples.iter_rows().map(|r| p.energy(r)).collect();
    let final_bias = samples.iter_rows().map(|r| bias.value(r)).collect();
    Ok(MetadynamicsRun {
        samples,
        energies,
        final_bias,
        bias,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UmbrellaParams {
    /// Force constant `k_us`.
    pub k: f64,
    /// Intermediate windows between the start CVs and the target.
    pub windows: usize,
    /// Steps spent in each intermediate window.
    pub relax_steps: u64,
    /// Steps between candidate samples in the final window.
    pub stride: u64,
    /// Step cap for the final window.
    pub max_steps: u64,
    /// Accepted CV distance; `2/√(βk)` when absent.
    pub tolerance: Option<f64>,
}

impl UmbrellaParams {
    pub fn tolerance(&self, beta: f64) -> f64 {
        self.tolerance.unwrap_or(2.0 / (beta * self.k).sqrt())
    }
}

#[derive(Debug, Clone)]
pub struct UmbrellaRun {
    pub samples: Tensor,
    /// RMS CV distance of the kept samples to the target.
    pub rms_distance: f64,
    pub steps: u64,
}

/// Drags the CVs from `s(x_init)` to `target` through a sequence of
/// restraint windows, then keeps `n_keep` states of the final window whose
/// CV distance to the target is within tolerance.
#[allow(clippy::too_many_arguments)]
pub fn umbrella_relax(
    p: &dyn Potential,
    cv: Projection,
    params: UmbrellaParams,
    target: &[f64],
    x_init: &[f64],
    integ: Integrator,
    n_keep: usize,
    rng: &mut dyn RngCore,
) -> Result<UmbrellaRun> {
    check_start(p, x_init)?;
    if target.len() != cv.dim() || params.stride == 0 || !(params.k > 0.0) {
        return Err(SdeError::Invalid(format!("{params:?} with target {target:?}")));
    }
    let d = p.dim();
    let tol = params.tolerance(integ.beta);
    let start = cv.eval(x_init);
    let mut bias = UmbrellaBias {
        cv,
        k: params.k,
        target: start.clone(),
    };
    let mut x = x_init.to_vec();
    let mut g = vec![0.0; d];
    let mut steps = 0u64;
    for w in 1..=params.windows {
        let f = w as f64 / (params.windows + 1) as f64;
        bias.target = start.iter().zip(target).map(|(a, b)| a + f * (b - a)).collect();
        for _ in 0..params.relax_steps {
            integ.step(p, Some(&bias), &mut x, &mut g, rng);
            p.reflect(&mut x);
            steps += 1;
            finite(&x, steps)?;
        }
    }
    bias.target = target.to_vec();
    let mut rows = Vec::with_capacity(n_keep * d);
    let mut sq = 0.0;
    let mut kept = 0;
    let mut t = 0u64;
    loop {
        if t.is_multiple_of(params.stride) {
            let dist = bias.distance(&x);
            if dist <= tol {
                rows.extend_from_slice(&x);
                sq += dist * dist;
                kept += 1;
                if kept == n_keep {
                    break;
                }
            }
        }
        if t == params.max_steps {
            let distance = if kept > 0 { (sq / kept as f64).sqrt() } else { bias.distance(&x) };
            return Err(SdeError::NoConvergence {
                kept,
                wanted: n_keep,
                steps: steps + t,
                distance,
            });
        }
        integ.step(p, Some(&bias), &mut x, &mut g, rng);
        p.reflect(&mut x);
        t += 1;
        finite(&x, steps + t)?;
    }
    Ok(UmbrellaRun {
        samples: Tensor::new(vec![kept, d], rows).expect("shape matches"),
        rms_distance: if kept > 0 { (sq / kept as f64).sqrt() } else { 0.0 },
        steps: steps + t,
    })
}
