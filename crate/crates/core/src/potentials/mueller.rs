use std::f64::consts::PI;

use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use super::{gaussian, BoxDomain, Potential, PotentialError, Result, Set};
use crate::autodiff::Tensor;

pub(super) fn default_dim() -> usize {
    10
}

pub(super) fn default_beta() -> f64 {
    0.1
}

pub(super) fn default_sigma() -> f64 {
    0.05
}

/// Coefficients of
/// `V_rm = Σ D_i exp(a_i dx² + b_i dx dy + c_i dy²) + γ sin(2kπx) sin(2kπy)`
/// with `dx = x - ξ_i`, `dy = y - η_i`.
///
/// Defaults are the standard Mueller–Brown constants with `γ = 9`, `k = 5`.
/// These are taken from the literature on the rugged variant, not derived here.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MuellerParams {
    pub d: [f64; 4],
    pub a: [f64; 4],
    pub b: [f64; 4],
    pub c: [f64; 4],
    pub xi: [f64; 4],
    pub eta: [f64; 4],
    pub gamma: f64,
    pub k: f64,
    pub center_a: [f64; 2],
    pub center_b: [f64; 2],
    pub radius: f64,
}

impl Default for MuellerParams {
    fn default() -> Self {
        Self {
            d: [-200.0, -100.0, -170.0, 15.0],
            a: [-1.0, -1.0, -6.5, 0.7],
            b: [0.0, 0.0, 11.0, 0.6],
            c: [-10.0, -10.0, -6.5, 0.7],
            xi: [1.0, 0.0, -0.5, -1.0],
            eta: [0.0, 0.5, 1.5, 1.0],
            gamma: 9.0,
            k: 5.0,
            center_a: [-0.558, 1.441],
            center_b: [0.623, 0.028],
            radius: 0.1,
        }
    }
}

impl MuellerParams {
    /// `V_rm(x, y)` and its gradient.
    pub fn eval(&self, x: f64, y: f64) -> (f64, f64, f64) {
        let (mut v, mut gx, mut gy) = (0.0, 0.0, 0.0);
        for i in 0..4 {
            let dx = x - self.xi[i];
            let dy = y - self.eta[i];
            let e = self.d[i] * (self.a[i] * dx * dx + self.b[i] * dx * dy + self.c[i] * dy * dy).exp();
            v += e;
            gx += e * (2.0 * self.a[i] * dx + self.b[i] * dy);
            gy += e * (self.b[i] * dx + 2.0 * self.c[i] * dy);
        }
        if self.gamma != 0.0 {
            let w = 2.0 * self.k * PI;
            let (sx, cx) = (w * x).sin_cos();
            let (sy, cy) = (w * y).sin_cos();
            v += self.gamma * sx * sy;
            gx += self.gamma * w * cx * sy;
            gy += self.gamma * w * sx * cy;
        }
        (v, gx, gy)
    }
}

/// `V(x) = V_rm(x₁, x₂) + Σ_{i≥3} x_i² / (2σ²)` on
/// `[-1.5, 1] × [-0.5, 2] × [-1, 1]^{d-2}`, with `A`, `B` cylinders over
/// discs in the `(x₁, x₂)` plane.
#[derive(Debug, Clone)]
pub struct RuggedMueller {
    params: MuellerParams,
    sigma: f64,
    beta: f64,
    domain: BoxDomain,
}

impl RuggedMueller {
    pub fn new(dim: usize, beta: f64, sigma: f64, params: MuellerParams) -> Result<Self> {
        if dim < 2 {
            return Err(PotentialError::Invalid(format!("dimension {dim} < 2")));
        }
        if !(beta > 0.0 && sigma > 0.0 && params.radius > 0.0) {
            return Err(PotentialError::Invalid("beta, sigma and radius must be positive".into()));
        }
        let mut lo = vec![-1.5, -0.5];
        let mut hi = vec![1.0, 2.0];
        lo.resize(dim, -1.0);
        hi.resize(dim, 1.0);
        Ok(Self {
            params,
            sigma,
            beta,
            domain: BoxDomain::new(lo, hi)?,
        })
    }

    pub fn params(&self) -> &MuellerParams {
        &self.params
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    fn center(&self, set: Set) -> [f64; 2] {
        match set {
            Set::A => self.params.center_a,
            Set::B => self.params.center_b,
        }
    }
}

impl Potential for RuggedMueller {
    fn name(&self) -> &str {
        "rugged-mueller"
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

    fn energy(&self, x: &[f64]) -> f64 {
        let k = 0.5 / (self.sigma * self.sigma);
        self.params.eval(x[0], x[1]).0 + k * x[2..].iter().map(|v| v * v).sum::<f64>()
    }

    fn energy_grad(&self, x: &[f64], grad: &mut [f64]) -> f64 {
        let k = 0.5 / (self.sigma * self.sigma);
        let (v, gx, gy) = self.params.eval(x[0], x[1]);
        grad[0] = gx;
        grad[1] = gy;
        let mut ext = 0.0;
        for (g, xi) in grad[2..].iter_mut().zip(&x[2..]) {
            ext += xi * xi;
            *g = 2.0 * k * xi;
        }
        v + k * ext
    }

    fn in_set(&self, set: Set, x: &[f64]) -> bool {
        let c = self.center(set);
        let r = self.params.radius;
        (x[0] - c[0]).powi(2) + (x[1] - c[1]).powi(2) <= r * r
    }

    /// Uniform on the circle (shrunk by 1e-9 relative so rounding keeps the
    /// point inside); extended coordinates from `N(0, σ²)` restricted to the box.
    fn sample_set(&self, set: Set, n: usize, rng: &mut dyn RngCore) -> Tensor {
        let d = self.dim();
        let c = self.center(set);
        let r = self.params.radius * (1.0 - 1e-9);
        let mut data = vec![0.0; n * d];
        for row in data.chunks_mut(d) {
            let t = rng.random_range(0.0..2.0 * PI);
            row[0] = c[0] + r * t.cos();
            row[1] = c[1] + r * t.sin();
            for (i, v) in row.iter_mut().enumerate().skip(2) {
                *v = loop {
                    let z = self.sigma * gaussian(rng);
                    if z > self.domain.lo[i] && z < self.domain.hi[i] {
                        break z;
                    }
                };
            }
        }
        Tensor::new(vec![n, d], data).expect("shape matches")
    }

    fn interior_log_density(&self) -> f64 {
        let r = self.params.radius;
        let plane = (self.domain.hi[0] - self.domain.lo[0]) * (self.domain.hi[1] - self.domain.lo[1]);
        let ext: f64 = (2..self.dim()).map(|i| (self.domain.hi[i] - self.domain.lo[i]).ln()).sum();
        -((plane - 2.0 * PI * r * r).ln() + ext)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minima_values_match_direct_evaluation() {
        // reference values from a 40-digit evaluation of the same formula
        let p = MuellerParams {
            gamma: 0.0,
            ..Default::default()
        };
        let (v, gx, gy) = p.eval(-0.558, 1.441);
        assert!((v - -146.698_574_932_036_05).abs() < 1e-10, "{v}");
        assert!(gx.abs() < 3.0 && gy.abs() < 3.0);
        assert!((p.eval(0.623, 0.028).0 - -108.166_650_053_533_04).abs() < 1e-10);
        let rugged = MuellerParams::default();
        assert!((rugged.eval(-0.558, 1.441).0 - -138.327_456_288_872_52).abs() < 1e-9);
        assert!((rugged.eval(0.2, 0.7).0 - -29.918_563_667_989_633).abs() < 1e-9);
    }

    #[test]
    fn extension_term() {
        let p = RuggedMueller::new(10, 0.1, 0.05, MuellerParams::default()).unwrap();
        let mut x = vec![0.0; 10];
        x[0] = -0.3;
        x[1] = 0.9;
        let base = p.params().eval(-0.3, 0.9).0;
        assert_eq!(p.energy(&x), base);
        x[4] = 0.1;
        assert!((p.energy(&x) - base - 0.01 / (2.0 * 0.0025)).abs() < 1e-12);
    }

    #[test]
    fn set_membership() {
        let p = RuggedMueller::new(3, 0.1, 0.05, MuellerParams::default()).unwrap();
        assert!(p.in_set(Set::A, &[-0.558, 1.441, 0.9]));
        assert!(p.in_set(Set::A, &[-0.558, 1.541, 0.0]));
        assert!(!p.in_set(Set::A, &[-0.558, 1.542, 0.0]));
        assert!(p.in_set(Set::B, &[0.623, 0.028, -0.5]));
        assert!(!p.in_set(Set::B, &[0.0, 0.5, 0.0]));
    }
}
