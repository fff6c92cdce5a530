use std::f64::consts::PI;

use rand::{Rng, RngCore};

use super::{gaussian, BoxDomain, Potential, PotentialError, Result, Set};
use crate::autodiff::Tensor;

pub(super) fn default_dim() -> usize {
    20
}

pub(super) fn default_inner() -> f64 {
    1.0
}

pub(super) fn default_outer() -> f64 {
    2.0
}

pub(super) fn default_beta() -> f64 {
    0.5
}

/// Free diffusion (`V ≡ 0`) with `A = {‖x‖ ≤ a}`, `B = {‖x‖ ≥ b}` on the box
/// `[-b, b]^d`. Steps that leave the ball of radius `b` are mirrored back
/// radially.
#[derive(Debug, Clone)]
pub struct BrownianAnnulus {
    a: f64,
    b: f64,
    beta: f64,
    domain: BoxDomain,
}

impl BrownianAnnulus {
    pub fn new(dim: usize, a: f64, b: f64, beta: f64) -> Result<Self> {
        if dim < 1 || !(0.0 < a && a < b) || !(beta > 0.0) {
            return Err(PotentialError::Invalid(format!(
                "annulus needs dim ≥ 1, 0 < a < b, beta > 0 (got {dim}, {a}, {b}, {beta})"
            )));
        }
        Ok(Self {
            a,
            b,
            beta,
            domain: BoxDomain::cube(dim, -b, b),
        })
    }

    pub fn inner(&self) -> f64 {
        self.a
    }

    pub fn outer(&self) -> f64 {
        self.b
    }

    fn check_dim(&self) -> Result<usize> {
        let d = self.dim();
        if d < 3 {
            return Err(PotentialError::Unsupported(format!(
                "closed-form committor needs d ≥ 3, got {d}"
            )));
        }
        Ok(d)
    }

    /// Radial committor `q(r) = (a^{2-d} - r^{2-d}) / (a^{2-d} - b^{2-d})`,
    /// clamped to 0 inside `A` and 1 inside `B`.
    pub fn committor_radial(&self, r: f64) -> Result<f64> {
        let d = self.check_dim()? as f64;
        if r <= self.a {
            return Ok(0.0);
        }
        if r >= self.b {
            return Ok(1.0);
        }
        let e = 2.0 - d;
        // divide through by a^{2-d} to keep the powers bounded
        let num = 1.0 - (r / self.a).powf(e);
        let den = 1.0 - (self.b / self.a).powf(e);
        Ok(num / den)
    }

    /// `dq/dr` on `(a, b)`.
    pub fn committor_radial_derivative(&self, r: f64) -> Result<f64> {
        let d = self.check_dim()? as f64;
        let den = 1.0 - (self.b / self.a).powf(2.0 - d);
        Ok((d - 2.0) * (r / self.a).powf(1.0 - d) / (self.a * den))
    }

    pub fn reference_committor(&self, x: &[f64]) -> Result<f64> {
        if x.len() != self.dim() {
            return Err(PotentialError::Dimension {
                expected: self.dim(),
                got: x.len(),
            });
        }
        self.committor_radial(norm(x))
    }

    pub fn reference_committor_batch(&self, x: &Tensor) -> Result<Vec<f64>> {
        x.iter_rows().map(|r| self.reference_committor(r)).collect()
    }

    fn sphere_point(&self, radius: f64, rng: &mut dyn RngCore, row: &mut [f64]) {
        loop {
            for v in row.iter_mut() {
                *v = gaussian(rng);
            }
            let n = norm(row);
            if n > 1e-12 {
                for v in row.iter_mut() {
                    *v *= radius / n;
                }
                return;
            }
        }
    }
}

pub(crate) fn norm(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

impl Potential for BrownianAnnulus {
    fn name(&self) -> &str {
        "brownian-annulus"
    }

    fn dim(&self) -> usize {
        self.domain.dim()
    }

    fn beta(&self) -> f64 {
        self.beta
    }

    fn domain(&self) -> &BoxDomain {
        &self.domain
    }

    fn energy(&self, _x: &[f64]) -> f64 {
        0.0
    }

    fn energy_grad(&self, _x: &[f64], grad: &mut [f64]) -> f64 {
        grad.fill(0.0);
        0.0
    }

    fn in_set(&self, set: Set, x: &[f64]) -> bool {
        let r2: f64 = x.iter().map(|v| v * v).sum();
        match set {
            Set::A => r2 <= self.a * self.a,
            Set::B => r2 >= self.b * self.b,
        }
    }

    /// Uniform on the sphere `‖x‖ = a` (resp. `b`), nudged by 1e-13 relative
    /// into the set.
    fn sample_set(&self, set: Set, n: usize, rng: &mut dyn RngCore) -> Tensor {
        let d = self.dim();
        let radius = match set {
            Set::A => self.a * (1.0 - 1e-13),
            Set::B => self.b * (1.0 + 1e-13),
        };
        let mut data = vec![0.0; n * d];
        for row in data.chunks_mut(d) {
            loop {
                self.sphere_point(radius, rng, row);
                for v in row.iter_mut() {
                    *v = v.clamp(-self.b, self.b);
                }
                if self.in_set(set, row) {
                    break;
                }
            }
        }
        Tensor::new(vec![n, d], data).expect("shape matches")
    }

    /// Uniform in the open shell `a < ‖x‖ < b`.
    fn sample_interior(&self, rng: &mut dyn RngCore, x: &mut [f64]) {
        let d = self.dim() as f64;
        loop {
            let u: f64 = rng.random();
            let r = (self.a.powf(d) + u * (self.b.powf(d) - self.a.powf(d))).powf(1.0 / d);
            self.sphere_point(r, rng, x);
            if !self.in_ab(x) {
                return;
            }
        }
    }

    fn interior_log_density(&self) -> f64 {
        let d = self.dim() as f64;
        let log_unit_ball = 0.5 * d * PI.ln() - libm::lgamma(0.5 * d + 1.0);
        let log_shell = d * self.b.ln() + (1.0 - (self.a / self.b).powf(d)).ln();
        -(log_unit_ball + log_shell)
    }

    /// Box reflection followed by radial mirroring at `‖x‖ = b`.
    fn reflect(&self, x: &mut [f64]) {
        self.domain.reflect(x);
        let r = norm(x);
        if r > self.b {
            let target = (2.0 * self.b - r).max(0.0);
            for v in x.iter_mut() {
                *v *= target / r;
            }
        }
    }
}
