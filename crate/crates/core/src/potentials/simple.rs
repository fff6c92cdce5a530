//! Small test landscapes with closed-form behaviour.

use std::f64::consts::PI;

use rand::{Rng, RngCore};

use super::{BoxDomain, Potential, Set};
use crate::autodiff::Tensor;

/// Free diffusion on `[0, 1]` with `A = {x ≤ 0}`, `B = {x ≥ 1}`; `q(x) = x`.
#[derive(Debug, Clone)]
pub struct Interval {
    beta: f64,
    domain: BoxDomain,
}

impl Interval {
    pub fn new(beta: f64) -> Self {
        Self {
            beta,
            domain: BoxDomain::cube(1, 0.0, 1.0),
        }
    }
}

impl Potential for Interval {
    fn name(&self) -> &str {
        "interval"
    }

    fn dim(&self) -> usize {
        1
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
        grad[0] = 0.0;
        0.0
    }

    fn in_set(&self, set: Set, x: &[f64]) -> bool {
        match set {
            Set::A => x[0] <= 0.0,
            Set::B => x[0] >= 1.0,
        }
    }

    fn sample_set(&self, set: Set, n: usize, _rng: &mut dyn RngCore) -> Tensor {
        let v = if set == Set::A { 0.0 } else { 1.0 };
        Tensor::full(&[n, 1], v)
    }

    fn sample_interior(&self, rng: &mut dyn RngCore, x: &mut [f64]) {
        x[0] = loop {
            let u: f64 = rng.random();
            if u > 0.0 {
                break u;
            }
        };
    }

    fn interior_log_density(&self) -> f64 {
        0.0
    }
}

/// `V = ½ k ‖x‖²` on `[-L, L]^d`, with `A = {x₁ ≤ -L/2}`, `B = {x₁ ≥ L/2}`.
#[derive(Debug, Clone)]
pub struct Quadratic {
    stiffness: f64,
    beta: f64,
    domain: BoxDomain,
}

impl Quadratic {
    pub fn new(dim: usize, stiffness: f64, beta: f64, half_width: f64) -> Self {
        Self {
            stiffness,
            beta,
            domain: BoxDomain::cube(dim, -half_width, half_width),
        }
    }

    fn half_width(&self) -> f64 {
        self.domain.hi[0]
    }
}

impl Potential for Quadratic {
    fn name(&self) -> &str {
        "quadratic"
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
        0.5 * self.stiffness * x.iter().map(|v| v * v).sum::<f64>()
    }

    fn energy_grad(&self, x: &[f64], grad: &mut [f64]) -> f64 {
        for (g, v) in grad.iter_mut().zip(x) {
            *g = self.stiffness * v;
        }
        self.energy(x)
    }

    fn in_set(&self, set: Set, x: &[f64]) -> bool {
        let h = 0.5 * self.half_width();
        match set {
            Set::A => x[0] <= -h,
            Set::B => x[0] >= h,
        }
    }

    fn sample_set(&self, set: Set, n: usize, rng: &mut dyn RngCore) -> Tensor {
        let d = self.dim();
        let mut data = vec![0.0; n * d];
        for row in data.chunks_mut(d) {
            self.domain.sample_uniform(rng, row);
            row[0] = 0.5 * self.half_width() * if set == Set::A { -1.0 } else { 1.0 };
        }
        Tensor::new(vec![n, d], data).expect("shape matches")
    }
}

/// `V = h (x₁² - 1)² + ½ κ x₂²` on `[-2, 2]²`, with `A`, `B` discs of radius
/// 0.2 around the minima `(∓1, 0)`.
#[derive(Debug, Clone)]
pub struct DoubleWell {
    height: f64,
    kappa: f64,
    beta: f64,
    domain: BoxDomain,
}

impl DoubleWell {
    pub const RADIUS: f64 = 0.2;

    pub fn new(height: f64, kappa: f64, beta: f64) -> Self {
        Self {
            height,
            kappa,
            beta,
            domain: BoxDomain::cube(2, -2.0, 2.0),
        }
    }

    fn center(set: Set) -> f64 {
        if set == Set::A {
            -1.0
        } else {
            1.0
        }
    }
}

impl Potential for DoubleWell {
    fn name(&self) -> &str {
        "double-well"
    }

    fn dim(&self) -> usize {
        2
    }

    fn beta(&self) -> f64 {
        self.beta
    }

    fn domain(&self) -> &BoxDomain {
        &self.domain
    }

    fn energy(&self, x: &[f64]) -> f64 {
        self.height * (x[0] * x[0] - 1.0).powi(2) + 0.5 * self.kappa * x[1] * x[1]
    }

    fn energy_grad(&self, x: &[f64], grad: &mut [f64]) -> f64 {
        grad[0] = 4.0 * self.height * x[0] * (x[0] * x[0] - 1.0);
        grad[1] = self.kappa * x[1];
        self.energy(x)
    }

    fn in_set(&self, set: Set, x: &[f64]) -> bool {
        (x[0] - Self::center(set)).powi(2) + x[1] * x[1] <= Self::RADIUS * Self::RADIUS
    }

    fn sample_set(&self, set: Set, n: usize, rng: &mut dyn RngCore) -> Tensor {
        let r = Self::RADIUS * (1.0 - 1e-9);
        let mut data = Vec::with_capacity(2 * n);
        for _ in 0..n {
            let t = rng.random_range(0.0..2.0 * PI);
            data.push(Self::center(set) + r * t.cos());
            data.push(r * t.sin());
        }
        Tensor::new(vec![n, 2], data).expect("shape matches")
    }
}
