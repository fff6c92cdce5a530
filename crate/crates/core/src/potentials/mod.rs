//! Energy landscapes with metastable sets `A` and `B`.
//!
//! Set membership uses closed sets (`≤` on radii). Every potential lives on a
//! box `Ω`; the dynamics reflect at its faces.

mod annulus;
mod mueller;
mod simple;

pub use annulus::BrownianAnnulus;
pub use mueller::{MuellerParams, RuggedMueller};
pub use simple::{DoubleWell, Interval, Quadratic};

use rand::RngCore;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::Tensor;
use crate::sde::Bias;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PotentialError {
    #[error("point {point:?} lies outside the domain box")]
    OutsideDomain { point: Vec<f64> },
    #[error("point has dimension {got}, expected {expected}")]
    Dimension { expected: usize, got: usize },
    #[error("{0}")]
    Unsupported(String),
    #[error("invalid parameter: {0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, PotentialError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Set {
    A,
    B,
}

/// Axis-aligned box `∏ [lo_i, hi_i]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoxDomain {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

impl BoxDomain {
    pub fn new(lo: Vec<f64>, hi: Vec<f64>) -> Result<Self> {
        if lo.len() != hi.len() || lo.iter().zip(&hi).any(|(l, h)| !(l < h)) {
            return Err(PotentialError::Invalid(format!("box bounds {lo:?} / {hi:?}")));
        }
        Ok(Self { lo, hi })
    }

    pub fn cube(dim: usize, lo: f64, hi: f64) -> Self {
        Self {
            lo: vec![lo; dim],
            hi: vec![hi; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.lo.len()
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        x.iter().zip(self.lo.iter().zip(&self.hi)).all(|(v, (l, h))| *l <= *v && *v <= *h)
    }

    pub fn strictly_contains(&self, x: &[f64]) -> bool {
        x.iter().zip(self.lo.iter().zip(&self.hi)).all(|(v, (l, h))| *l < *v && *v < *h)
    }

    pub fn log_volume(&self) -> f64 {
        self.lo.iter().zip(&self.hi).map(|(l, h)| (h - l).ln()).sum()
    }

    pub fn center(&self) -> Vec<f64> {
        self.lo.iter().zip(&self.hi).map(|(l, h)| 0.5 * (l + h)).collect()
    }

    /// Mirrors each coordinate back into `[lo, hi]`.
    pub fn reflect(&self, x: &mut [f64]) {
        for (v, (l, h)) in x.iter_mut().zip(self.lo.iter().zip(&self.hi)) {
            let w = h - l;
            if *v < *l || *v > *h {
                // fold onto a period of length 2w
                let mut t = (*v - l).rem_euclid(2.0 * w);
                if t > w {
                    t = 2.0 * w - t;
                }
                *v = l + t;
            }
        }
    }

    pub fn sample_uniform(&self, rng: &mut dyn RngCore, x: &mut [f64]) {
        use rand::Rng;
        for (v, (l, h)) in x.iter_mut().zip(self.lo.iter().zip(&self.hi)) {
            *v = rng.random_range(*l..*h);
        }
    }
}

/// An energy `V` on a box, with inverse temperature and metastable sets.
pub trait Potential: Send + Sync {
    fn name(&self) -> &str;
    fn dim(&self) -> usize;
    fn beta(&self) -> f64;
    fn domain(&self) -> &BoxDomain;

    fn energy(&self, x: &[f64]) -> f64;

    /// Writes `∇V(x)` into `grad` and returns `V(x)`.
    fn energy_grad(&self, x: &[f64], grad: &mut [f64]) -> f64;

    fn in_set(&self, set: Set, x: &[f64]) -> bool;

    /// `n` points of the set's boundary (or of the set, where it has no
    /// natural boundary parametrization), as `[n, d]`.
    fn sample_set(&self, set: Set, n: usize, rng: &mut dyn RngCore) -> Tensor;

    /// Uniform draw from `Ω \ (A ∪ B)`.
    fn sample_interior(&self, rng: &mut dyn RngCore, x: &mut [f64]) {
        loop {
            self.domain().sample_uniform(rng, x);
            if !self.in_set(Set::A, x) && !self.in_set(Set::B, x) {
                return;
            }
        }
    }

    /// Log of the uniform density on `Ω \ (A ∪ B)`, up to the volume of the
    /// excluded sets where that is not known in closed form.
    fn interior_log_density(&self) -> f64 {
        -self.domain().log_volume()
    }

    /// Returns the state to `Ω` after a step left it.
    fn reflect(&self, x: &mut [f64]) {
        self.domain().reflect(x);
    }

    fn in_ab(&self, x: &[f64]) -> bool {
        self.in_set(Set::A, x) || self.in_set(Set::B, x)
    }
}

/// `(V, ∇V)` with dimension and domain checks.
pub fn eval_potential(p: &dyn Potential, x: &[f64]) -> Result<(f64, Vec<f64>)> {
    if x.len() != p.dim() {
        return Err(PotentialError::Dimension {
            expected: p.dim(),
            got: x.len(),
        });
    }
    if !p.domain().contains(x) {
        return Err(PotentialError::OutsideDomain { point: x.to_vec() });
    }
    let mut g = vec![0.0; x.len()];
    let v = p.energy_grad(x, &mut g);
    Ok((v, g))
}

/// `n` uniform points of `Ω \ (A ∪ B)` as `[n, d]`.
pub fn sample_interior(p: &dyn Potential, n: usize, rng: &mut dyn RngCore) -> Tensor {
    let d = p.dim();
    let mut data = vec![0.0; n * d];
    for row in data.chunks_mut(d) {
        p.sample_interior(rng, row);
    }
    Tensor::new(vec![n, d], data).expect("shape matches")
}

/// Energies of the rows of `x`.
pub fn energies(p: &dyn Potential, x: &Tensor) -> Vec<f64> {
    x.iter_rows().map(|r| p.energy(r)).collect()
}

/// Estimate of `log ∫_{Ω \ (A ∪ B)} e^{-β_s (V + V_bias)} dx` by importance
/// sampling from a defensive mixture: with weight 0.9, Gaussian kernels on
/// up to 500 rows of `centers` (per-coordinate Scott bandwidth); with weight
/// 0.1, uniform interior points. `centers` should lie where the integrand is
/// large, e.g. samples of it.
pub fn log_partition(
    p: &dyn Potential,
    beta_s: f64,
    bias: Option<&dyn Bias>,
    centers: &Tensor,
    n: usize,
    rng: &mut dyn RngCore,
) -> f64 {
    use rand::Rng;
    let d = p.dim();
    let step = centers.rows().div_ceil(500).max(1);
    let c: Vec<&[f64]> = centers.iter_rows().step_by(step).collect();
    let m = c.len();
    let h: Vec<f64> = (0..d)
        .map(|k| {
            let mean = c.iter().map(|r| r[k]).sum::<f64>() / m.max(1) as f64;
            let var = c.iter().map(|r| (r[k] - mean).powi(2)).sum::<f64>() / m.max(1) as f64;
            let span = p.domain().hi[k] - p.domain().lo[k];
            (var.sqrt() * (m as f64).powf(-1.0 / (d as f64 + 4.0))).max(1e-3 * span)
        })
        .collect();
    let log_norm: f64 = h.iter().map(|hk| -(hk * (2.0 * std::f64::consts::PI).sqrt()).ln()).sum();
    let u_ld = p.interior_log_density();
    let mut x = vec![0.0; d];
    let mut logs = Vec::with_capacity(n);
    let mut kern = vec![0.0; m];
    for _ in 0..n {
        if m == 0 || rng.random::<f64>() < 0.1 {
            p.sample_interior(rng, &mut x);
        } else {
            let j = rng.random_range(0..m);
            for k in 0..d {
                x[k] = c[j][k] + h[k] * gaussian(rng);
            }
        }
        if !p.domain().contains(&x) || p.in_ab(&x) {
            logs.push(f64::NEG_INFINITY);
            continue;
        }
        for (j, cj) in c.iter().enumerate() {
            kern[j] = log_norm - 0.5 * (0..d).map(|k| ((x[k] - cj[k]) / h[k]).powi(2)).sum::<f64>();
        }
        let lg = log_sum_exp(&[
            (0.9f64).ln() + log_sum_exp(&kern[..m]) - (m.max(1) as f64).ln(),
            (0.1f64).ln() + u_ld,
        ]);
        let e = p.energy(&x) + bias.map_or(0.0, |b| b.value(&x));
        logs.push(-beta_s * e - lg);
    }
    log_sum_exp(&logs) - (n as f64).ln()
}

fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

pub(crate) fn gaussian(rng: &mut dyn RngCore) -> f64 {
    use rand::Rng;
    rng.sample(rand_distr::StandardNormal)
}

/// Potential selected by id in experiment configs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "id", rename_all = "kebab-case", deny_unknown_fields)]
#[allow(clippy::large_enum_variant)]
pub enum PotentialConfig {
    RuggedMueller {
        #[serde(default = "mueller::default_dim")]
        dim: usize,
        #[serde(default = "mueller::default_beta")]
        beta: f64,
        #[serde(default = "mueller::default_sigma")]
        sigma: f64,
        #[serde(default)]
        params: MuellerParams,
    },
    BrownianAnnulus {
        #[serde(default = "annulus::default_dim")]
        dim: usize,
        #[serde(default = "annulus::default_inner")]
        inner: f64,
        #[serde(default = "annulus::default_outer")]
        outer: f64,
        #[serde(default = "annulus::default_beta")]
        beta: f64,
    },
}

impl PotentialConfig {
    pub fn build(&self) -> Result<Box<dyn Potential>> {
        Ok(match self {
            PotentialConfig::RuggedMueller {
                dim,
                beta,
                sigma,
                params,
            } => Box::new(RuggedMueller::new(*dim, *beta, *sigma, params.clone())?),
            PotentialConfig::BrownianAnnulus { dim, inner, outer, beta } => {
                Box::new(BrownianAnnulus::new(*dim, *inner, *outer, *beta)?)
            }
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn check_gradient(p: &dyn Potential, rng: &mut ChaCha8Rng, n: usize) {
        let d = p.dim();
        let mut x = vec![0.0; d];
        let mut g = vec![0.0; d];
        let h = 1e-6;
        for _ in 0..n {
            // stay away from the faces so the stencil is inside the box
            for (i, v) in x.iter_mut().enumerate() {
                let (l, u) = (p.domain().lo[i], p.domain().hi[i]);
                *v = rng.random_range(l + 0.01 * (u - l)..u - 0.01 * (u - l));
            }
            p.energy_grad(&x, &mut g);
            let scale = g.iter().map(|v| v.abs()).fold(1.0, f64::max);
            for i in 0..d {
                let mut xp = x.clone();
                let mut xm = x.clone();
                xp[i] += h;
                xm[i] -= h;
                let fd = (p.energy(&xp) - p.energy(&xm)) / (2.0 * h);
                assert!(
                    (fd - g[i]).abs() <= 1e-6 * scale,
                    "{}: component {i} at {x:?}: {} vs {fd}",
                    p.name(),
                    g[i]
                );
            }
        }
    }

    #[test]
    fn reflection_lands_inside() {
        let b = BoxDomain::cube(2, -1.0, 1.0);
        let mut x = [1.3, -3.5];
        b.reflect(&mut x);
        assert!((x[0] - 0.7).abs() < 1e-12 && (x[1] - 0.5).abs() < 1e-12, "{x:?}");
        let mut r = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..1000 {
            let mut y = [r.random_range(-20.0..20.0), r.random_range(-20.0..20.0)];
            b.reflect(&mut y);
            assert!(b.contains(&y));
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut r = ChaCha8Rng::seed_from_u64(1);
        let pots: Vec<Box<dyn Potential>> = vec![
            Box::new(RuggedMueller::new(10, 0.1, 0.05, MuellerParams::default()).unwrap()),
            Box::new(RuggedMueller::new(2, 0.1, 0.05, MuellerParams::default()).unwrap()),
            Box::new(BrownianAnnulus::new(20, 1.0, 2.0, 0.5).unwrap()),
            Box::new(Quadratic::new(3, 2.0, 1.0, 5.0)),
            Box::new(DoubleWell::new(1.0, 4.0, 1.0)),
            Box::new(Interval::new(1.0)),
        ];
        for p in &pots {
            check_gradient(p.as_ref(), &mut r, 100);
        }
    }

    #[test]
    fn eval_checks_domain_and_dimension() {
        let p = BrownianAnnulus::new(3, 1.0, 2.0, 0.5).unwrap();
        assert_eq!(eval_potential(&p, &[0.0, 0.0, 1.5]).unwrap(), (0.0, vec![0.0; 3]));
        assert!(matches!(
            eval_potential(&p, &[0.0, 0.0, 2.5]),
            Err(PotentialError::OutsideDomain { .. })
        ));
        assert!(matches!(
            eval_potential(&p, &[0.0, 1.5]),
            Err(PotentialError::Dimension { .. })
        ));
    }

    #[test]
    fn sets_are_disjoint_and_boundary_samples_belong() {
        let mut r = ChaCha8Rng::seed_from_u64(2);
        let pots: Vec<Box<dyn Potential>> = vec![
            Box::new(RuggedMueller::new(10, 0.1, 0.05, MuellerParams::default()).unwrap()),
            Box::new(BrownianAnnulus::new(20, 1.0, 2.0, 0.5).unwrap()),
            Box::new(Interval::new(1.0)),
            Box::new(DoubleWell::new(1.0, 4.0, 1.0)),
        ];
        for p in &pots {
            for set in [Set::A, Set::B] {
                let other = if set == Set::A { Set::B } else { Set::A };
                let s = p.sample_set(set, 500, &mut r);
                assert_eq!(s.shape(), &[500, p.dim()]);
                for row in s.iter_rows() {
                    assert!(p.in_set(set, row), "{}: {row:?}", p.name());
                    assert!(!p.in_set(other, row));
                    assert!(p.domain().contains(row));
                }
            }
            let x = sample_interior(p.as_ref(), 500, &mut r);
            assert!(x.iter_rows().all(|row| !p.in_ab(row) && p.domain().contains(row)));
        }
    }

    #[test]
    fn boundary_sampling_is_deterministic() {
        let p = RuggedMueller::new(10, 0.1, 0.05, MuellerParams::default()).unwrap();
        let a = p.sample_set(Set::A, 50, &mut ChaCha8Rng::seed_from_u64(9));
        let b = p.sample_set(Set::A, 50, &mut ChaCha8Rng::seed_from_u64(9));
        assert_eq!(a, b);
    }

    #[test]
    fn config_builds_by_id() {
        let cfg: PotentialConfig = toml::from_str("id = \"brownian-annulus\"\ndim = 5").unwrap();
        let p = cfg.build().unwrap();
        assert_eq!((p.name(), p.dim(), p.beta()), ("brownian-annulus", 5, 0.5));
        let cfg: PotentialConfig = toml::from_str("id = \"rugged-mueller\"\ndim = 2").unwrap();
        assert_eq!(cfg.build().unwrap().dim(), 2);
        assert!(toml::from_str::<PotentialConfig>("dim = 5").is_err());
    }

    #[test]
    fn log_partition_matches_quadrature() {
        let mut r = ChaCha8Rng::seed_from_u64(1);
        let a = BrownianAnnulus::new(6, 1.0, 2.0, 1.0).unwrap();
        let u = sample_interior(&a, 200, &mut r);
        let lz = log_partition(&a, 1.0, None, &u, 20_000, &mut r);
        assert!((lz + a.interior_log_density()).abs() < 0.02, "{lz}");

        // 2-D part by quadrature, extended coordinates in closed form
        let (beta, sigma) = (0.1, 0.05);
        let p2 = RuggedMueller::new(2, beta, sigma, MuellerParams::default()).unwrap();
        let (n, dom) = (800, p2.domain().clone());
        let (hx, hy) = ((dom.hi[0] - dom.lo[0]) / n as f64, (dom.hi[1] - dom.lo[1]) / n as f64);
        let mut z = 0.0;
        for i in 0..n {
            for j in 0..n {
                let x = [dom.lo[0] + (i as f64 + 0.5) * hx, dom.lo[1] + (j as f64 + 0.5) * hy];
                if !p2.in_ab(&x) {
                    z += (-beta * p2.energy(&x)).exp() * hx * hy;
                }
            }
        }
        let c = beta * 0.5 / (sigma * sigma);
        let ext = (std::f64::consts::PI / c).sqrt() * libm::erf(c.sqrt());
        let exact = z.ln() + 8.0 * ext.ln();

        let p = RuggedMueller::new(10, beta, sigma, MuellerParams::default()).unwrap();
        let mut centers = sample_interior(&p, 2000, &mut r);
        for row in centers.data_mut().chunks_mut(10) {
            for v in &mut row[2..] {
                *v = (0.5 / c).sqrt() * gaussian(&mut r);
            }
        }
        let lz = log_partition(&p, beta, None, &centers, 200_000, &mut r);
        assert!((lz - exact).abs() < 0.1, "{lz} vs {exact}");
    }
}
