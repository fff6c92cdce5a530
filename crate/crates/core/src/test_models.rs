//! Closed-form committor models for unit tests.

use crate::autodiff::{Tape, Tensor, Var};
use crate::checkpoint::Parameterized;
use crate::nets::CommittorModel;

/// The radial annulus committor `(a^{2-d} - r^{2-d}) / (a^{2-d} - b^{2-d})`
/// on the tape, with no parameters.
pub(crate) struct AnnulusExact {
    pub d: usize,
    pub a: f64,
    pub b: f64,
    pub none: Vec<Tensor>,
}

impl AnnulusExact {
    pub fn new(d: usize, a: f64, b: f64) -> Self {
        Self { d, a, b, none: Vec::new() }
    }
}

impl Parameterized for AnnulusExact {
    fn param_names(&self) -> Vec<String> {
        Vec::new()
    }
    fn params(&self) -> Vec<&Tensor> {
        self.none.iter().collect()
    }
    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.none.iter_mut().collect()
    }
}

impl CommittorModel for AnnulusExact {
    fn dim(&self) -> usize {
        self.d
    }
    fn apply(&self, tape: &mut Tape, _params: &[Var], x: Var) -> crate::nets::Result<Var> {
        let e = 2.0 - self.d as f64;
        let (ta, tb) = (self.a.powf(e), self.b.powf(e));
        let sq = tape.square(x);
        let r2 = tape.sum_cols(sq)?;
        let l = tape.log(r2);
        let s = tape.scale(l, 0.5 * e);
        let p = tape.exp(s);
        let num = tape.scale(p, -1.0);
        let num = tape.shift(num, ta);
        Ok(tape.scale(num, 1.0 / (ta - tb)))
    }
}

/// `q ≡ c`.
pub(crate) struct Constant {
    pub d: usize,
    pub c: f64,
    pub none: Vec<Tensor>,
}

impl Constant {
    pub fn new(d: usize, c: f64) -> Self {
        Self { d, c, none: Vec::new() }
    }
}

impl Parameterized for Constant {
    fn param_names(&self) -> Vec<String> {
        Vec::new()
    }
    fn params(&self) -> Vec<&Tensor> {
        self.none.iter().collect()
    }
    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.none.iter_mut().collect()
    }
}

impl CommittorModel for Constant {
    fn dim(&self) -> usize {
        self.d
    }
    fn apply(&self, tape: &mut Tape, _params: &[Var], x: Var) -> crate::nets::Result<Var> {
        let s = tape.sum_cols(x)?;
        let z = tape.scale(s, 0.0);
        Ok(tape.shift(z, self.c))
    }
}
