use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;

/// Learning-rate schedule: `lr * decay^(floor(epoch / every))`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StepDecay {
    pub lr: f64,
    #[serde(default = "one")]
    pub decay: f64,
    #[serde(default = "never")]
    pub every: usize,
}

fn one() -> f64 {
    1.0
}

fn never() -> usize {
    usize::MAX
}

impl StepDecay {
    pub fn constant(lr: f64) -> Self {
        Self {
            lr,
            decay: 1.0,
            every: usize::MAX,
        }
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        if self.every == 0 || self.every == usize::MAX {
            return self.lr;
        }
        self.lr * self.decay.powi((epoch / self.every) as i32)
    }
}

/// Adam with bias correction. Moments are kept per parameter tensor.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Default for Adam {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }
}

impl Adam {
    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, lr: f64, params: &mut [&mut Tensor], grads: &[Tensor]) {
        assert_eq!(params.len(), grads.len());
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![0.0; p.numel()]).collect();
            self.v = self.m.clone();
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (k, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            for (((w, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                *w -= lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn decay_schedule() {
        let s = StepDecay {
            lr: 1e-3,
            decay: 0.8,
            every: 200,
        };
        assert_eq!(s.lr_at(0), 1e-3);
        assert_eq!(s.lr_at(199), 1e-3);
        assert!((s.lr_at(200) - 8e-4).abs() < 1e-18);
        assert!((s.lr_at(450) - 1e-3 * 0.64).abs() < 1e-18);
        assert_eq!(StepDecay::constant(0.1).lr_at(10_000), 0.1);
    }

    #[test]
    fn adam_minimizes_quadratic() {
        let mut p = Tensor::row(vec![3.0, -2.0]);
        let mut opt = Adam::default();
        for _ in 0..2000 {
            let g = p.map(|x| 2.0 * x);
            opt.step(0.05, &mut [&mut p], &[g]);
        }
        assert!(p.data().iter().all(|x| x.abs() < 1e-3), "{p:?}");
    }
}
