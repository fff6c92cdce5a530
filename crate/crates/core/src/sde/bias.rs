use serde::{Deserialize, Serialize};

/// Collective variables that pick coordinates of `x`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Projection {
    pub indices: Vec<usize>,
}

impl Projection {
    pub fn new(indices: Vec<usize>) -> Self {
        Self { indices }
    }

    /// The first `k` coordinates.
    pub fn leading(k: usize) -> Self {
        Self {
            indices: (0..k).collect(),
        }
    }

    pub fn dim(&self) -> usize {
        self.indices.len()
    }

    pub fn eval(&self, x: &[f64]) -> Vec<f64> {
        self.indices.iter().map(|&i| x[i]).collect()
    }
}

/// Extra energy added to `V` during simulation.
pub trait Bias {
    /// Adds `∇bias(x)` into `grad` and returns `bias(x)`.
    fn value_grad(&self, x: &[f64], grad: &mut [f64]) -> f64;

    fn value(&self, x: &[f64]) -> f64 {
        let mut g = vec![0.0; x.len()];
        self.value_grad(x, &mut g)
    }
}

/// Sum of Gaussian hills `w exp(-Σ (s_i(x) - c_i)² / 2σ²)` over deposits `c`.
#[derive(Debug, Clone, PartialEq)]
pub struct MetadynamicsBias {
    pub cv: Projection,
    pub height: f64,
    pub width: f64,
    deposits: Vec<Vec<f64>>,
}

impl MetadynamicsBias {
    pub fn new(cv: Projection, height: f64, width: f64) -> Self {
        Self {
            cv,
            height,
            width,
            deposits: Vec::new(),
        }
    }

    pub fn deposit(&mut self, x: &[f64]) {
        self.deposits.push(self.cv.eval(x));
    }

    pub fn deposits(&self) -> &[Vec<f64>] {
        &self.deposits
    }

    /// Bias as a function of the CV values.
    pub fn value_at_cv(&self, s: &[f64]) -> f64 {
        let inv = 0.5 / (self.width * self.width);
        self.deposits
            .iter()
            .map(|c| {
                let r2: f64 = c.iter().zip(s).map(|(a, b)| (a - b) * (a - b)).sum();
                self.height * (-r2 * inv).exp()
            })
            .sum()
    }
}

impl Bias for MetadynamicsBias {
    fn value_grad(&self, x: &[f64], grad: &mut [f64]) -> f64 {
        let inv = 0.5 / (self.width * self.width);
        let s = self.cv.eval(x);
        let mut v = 0.0;
        for c in &self.deposits {
            let r2: f64 = c.iter().zip(&s).map(|(a, b)| (a - b) * (a - b)).sum();
            let e = self.height * (-r2 * inv).exp();
            v += e;
            for (k, &i) in self.cv.indices.iter().enumerate() {
                grad[i] -= e * 2.0 * inv * (s[k] - c[k]);
            }
        }
        v
    }
}

/// Harmonic restraint `½ k Σ (s_i(x) - s_i⁰)²`.
#[derive(Debug, Clone, PartialEq)]
pub struct UmbrellaBias {
    pub cv: Projection,
    pub k: f64,
    pub target: Vec<f64>,
}

impl UmbrellaBias {
    /// Distance `|s(x) - s⁰|` in CV space.
    pub fn distance(&self, x: &[f64]) -> f64 {
        self.cv
            .eval(x)
            .iter()
            .zip(&self.target)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    }
}

impl Bias for UmbrellaBias {
    fn value_grad(&self, x: &[f64], grad: &mut [f64]) -> f64 {
        let mut v = 0.0;
        for (k, &i) in self.cv.indices.iter().enumerate() {
            let d = x[i] - self.target[k];
            v += d * d;
            grad[i] += self.k * d;
        }
        0.5 * self.k * v
    }
}
