//! Coupling flow on a box.
//!
//! A point `x` in the open box is mapped to `u = (x - lo)/(hi - lo)` in the
//! unit cube and then to `y = logit(u)` in `R^d`. A stack of blocks carries
//! `y` to `z`, which has a standard Gaussian prior. Each block is an
//! activation normalization, a run of affine coupling layers with
//! alternating halves frozen, and a fixed cyclic shift of the coordinates.
//!
//! Coupling layer, with `F` frozen and `T` transformed:
//!
//! ```text
//! y'_F = y_F
//! y'_T = y_T ⊙ exp(s(y_F)) + t(y_F),   s = s_max · tanh(ŝ / s_max)
//! ```
//!
//! where `(ŝ, t)` come from a small ReLU network whose last layer starts at
//! zero, so an untrained flow is the identity after the box map.

mod train;

pub use train::{importance_weights, normalize_weights, train_flow_ce, train_flow_weighted, CeConfig, CeReport};

use std::f64::consts::PI;
use std::rc::Rc;

use rand::RngCore;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{sigmoid, AutodiffError, Tape, Tensor, Var};
use crate::checkpoint::{Checkpoint, CheckpointError, Parameterized};
use crate::nets::{Activation, Mlp, MlpSpec, NetError};
use crate::potentials::{gaussian, BoxDomain, Potential};

#[derive(Debug, Error)]
pub enum FlowError {
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("row {row} lies on or outside the flow's box")]
    OutsideBox { row: usize },
    #[error("input has {got} columns, flow dimension is {expected}")]
    Dimension { expected: usize, got: usize },
    #[error("{rejected} of {total} importance weights were not finite")]
    TooManyRejected { rejected: usize, total: usize },
    #[error("only {got} of {wanted} samples outside A ∪ B after {passes} passes")]
    SamplingExhausted { got: usize, wanted: usize, passes: usize },
    #[error("invalid flow configuration: {0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, FlowError>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlowConfig {
    pub blocks: usize,
    pub layers_per_block: usize,
    /// Width of each of the two hidden layers of a coupling network.
    pub hidden: usize,
    #[serde(default = "default_scale_max")]
    pub scale_max: f64,
}

fn default_scale_max() -> f64 {
    5.0
}

impl Default for FlowConfig {
    fn default() -> Self {
        Self {
            blocks: 2,
            layers_per_block: 4,
            hidden: 64,
            scale_max: 5.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Coupling {
    frozen: Rc<[usize]>,
    active: Rc<[usize]>,
    net: Mlp,
}

#[derive(Debug, Clone, PartialEq)]
struct Block {
    log_scale: Tensor,
    shift: Tensor,
    couplings: Vec<Coupling>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FlowModel {
    domain: BoxDomain,
    config: FlowConfig,
    blocks: Vec<Block>,
    /// Output column `i` of the shift takes input column `perm[i]`.
    perm: Rc<[usize]>,
    inv_perm: Rc<[usize]>,
}

pub const FLOW_KIND: &str = "coupling-flow";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct FlowMeta {
    domain: BoxDomain,
    config: FlowConfig,
}

impl FlowModel {
    /// Untrained flow: coupling networks get Glorot weights with a zero
    /// output layer, so the initial map is the box transform alone.
    pub fn new<R: rand::Rng + ?Sized>(domain: BoxDomain, config: FlowConfig, rng: &mut R) -> Result<Self> {
        Self::build(domain, config, |widths| {
            let mut net = Mlp::new(widths, Activation::Relu, Activation::Identity, rng)?;
            net.zero_output_layer();
            Ok(net)
        })
    }

    fn build(
        domain: BoxDomain,
        config: FlowConfig,
        mut make: impl FnMut(&[usize]) -> std::result::Result<Mlp, NetError>,
    ) -> Result<Self> {
        let d = domain.dim();
        if d < 2 {
            return Err(FlowError::Invalid("coupling layers need d ≥ 2".into()));
        }
        if config.blocks == 0 || config.hidden == 0 || !(config.scale_max > 0.0) {
            return Err(FlowError::Invalid(format!("{config:?}")));
        }
        let half = d / 2;
        let first: Rc<[usize]> = (0..half).collect();
        let second: Rc<[usize]> = (half..d).collect();
        let mut blocks = Vec::with_capacity(config.blocks);
        for _ in 0..config.blocks {
            let mut couplings = Vec::with_capacity(config.layers_per_block);
            for l in 0..config.layers_per_block {
                let (frozen, active) = if l % 2 == 0 {
                    (first.clone(), second.clone())
                } else {
                    (second.clone(), first.clone())
                };
                let net = make(&[frozen.len(), config.hidden, config.hidden, 2 * active.len()])?;
                couplings.push(Coupling { frozen, active, net });
            }
            blocks.push(Block {
                log_scale: Tensor::zeros(&[1, d]),
                shift: Tensor::zeros(&[1, d]),
                couplings,
            });
        }
        let perm: Rc<[usize]> = (0..d).map(|i| (i + 1) % d).collect();
        let inv_perm: Rc<[usize]> = (0..d).map(|i| (i + d - 1) % d).collect();
        Ok(Self {
            domain,
            config,
            blocks,
            perm,
            inv_perm,
        })
    }

    pub fn dim(&self) -> usize {
        self.domain.dim()
    }

    pub fn domain(&self) -> &BoxDomain {
        &self.domain
    }

    pub fn config(&self) -> &FlowConfig {
        &self.config
    }

    fn check(&self, x: &Tensor) -> Result<()> {
        if x.rank() != 2 || x.cols() != self.dim() {
            return Err(FlowError::Dimension {
                expected: self.dim(),
                got: x.cols(),
            });
        }
        Ok(())
    }

    /// `y = logit((x - lo)/(hi - lo))` per row, with the log-det of that map.
    fn box_forward(&self, x: &Tensor) -> Result<(Tensor, Vec<f64>)> {
        self.check(x)?;
        let d = self.dim();
        let mut y = x.clone();
        let mut ld = vec![0.0; x.rows()];
        for (r, row) in y.data_mut().chunks_mut(d).enumerate() {
            for (i, v) in row.iter_mut().enumerate() {
                let (l, h) = (self.domain.lo[i], self.domain.hi[i]);
                let u = (*v - l) / (h - l);
                if !(u > 0.0 && u < 1.0) {
                    return Err(FlowError::OutsideBox { row: r });
                }
                *v = (u / (1.0 - u)).ln();
                ld[r] -= (h - l).ln() + u.ln() + (1.0 - u).ln();
            }
        }
        Ok((y, ld))
    }

    /// Maps `x` to `z`, with `log|det ∂z/∂x|` per row.
    pub fn forward(&self, x: &Tensor) -> Result<(Tensor, Vec<f64>)> {
        let (mut y, mut ld) = self.box_forward(x)?;
        for block in &self.blocks {
            block_forward(block, &self.perm, self.config.scale_max, &mut y, &mut ld)?;
        }
        Ok((y, ld))
    }

    /// Maps `z` back to `x`.
    pub fn inverse(&self, z: &Tensor) -> Result<Tensor> {
        self.check(z)?;
        let d = self.dim();
        let mut y = z.clone();
        for block in self.blocks.iter().rev() {
            block_inverse(block, &self.inv_perm, self.config.scale_max, &mut y)?;
        }
        for row in y.data_mut().chunks_mut(d) {
            for (i, v) in row.iter_mut().enumerate() {
                let (l, h) = (self.domain.lo[i], self.domain.hi[i]);
                *v = l + (h - l) * sigmoid(*v);
            }
        }
        Ok(y)
    }

    /// `log p(x)` per row.
    pub fn log_density(&self, x: &Tensor) -> Result<Vec<f64>> {
        let (z, ld) = self.forward(x)?;
        Ok(z.iter_rows().zip(ld).map(|(r, l)| log_normal(r) + l).collect())
    }

    /// `n` draws strictly inside the box.
    pub fn sample(&self, n: usize, rng: &mut dyn RngCore) -> Result<Tensor> {
        Ok(self.sample_filtered(n, rng, |_| true, 100)?.0)
    }

    /// `n` draws outside `A ∪ B` of `p`, by rejection with at most 100 passes.
    pub fn sample_outside(&self, n: usize, p: &dyn Potential, rng: &mut dyn RngCore) -> Result<Tensor> {
        Ok(self.sample_filtered(n, rng, |x| !p.in_ab(x), 100)?.0)
    }

    /// As [`Self::sample_outside`], also returning the accepted fraction of
    /// all draws.
    pub fn sample_outside_with_rate(
        &self,
        n: usize,
        p: &dyn Potential,
        rng: &mut dyn RngCore,
    ) -> Result<(Tensor, f64)> {
        let (x, drawn) = self.sample_filtered(n, rng, |x| !p.in_ab(x), 100)?;
        Ok((x, n as f64 / drawn.max(1) as f64))
    }

    fn sample_filtered(
        &self,
        n: usize,
        rng: &mut dyn RngCore,
        keep: impl Fn(&[f64]) -> bool,
        max_passes: usize,
    ) -> Result<(Tensor, usize)> {
        self.sample_filtered_batch(n, rng, |x| x.iter_rows().map(&keep).collect(), max_passes)
    }

    /// `n` draws inside the box for which `keep` (called on each batch of
    /// candidates) returns true, with at most `max_passes` batches. Also
    /// returns the number of draws.
    pub(crate) fn sample_filtered_batch(
        &self,
        n: usize,
        rng: &mut dyn RngCore,
        mut keep: impl FnMut(&Tensor) -> Vec<bool>,
        max_passes: usize,
    ) -> Result<(Tensor, usize)> {
        let d = self.dim();
        let mut out = Vec::with_capacity(n * d);
        let mut got = 0;
        let mut drawn = 0;
        for _ in 0..max_passes {
            if got == n {
                break;
            }
            let want = n - got;
            let z = Tensor::new(vec![want, d], (0..want * d).map(|_| gaussian(rng)).collect())?;
            let x = self.inverse(&z)?;
            drawn += want;
            let mask = keep(&x);
            for (row, ok) in x.iter_rows().zip(mask) {
                if got < n && ok && self.domain.strictly_contains(row) {
                    out.extend_from_slice(row);
                    got += 1;
                }
            }
        }
        if got < n {
            return Err(FlowError::SamplingExhausted {
                got,
                wanted: n,
                passes: max_passes,
            });
        }
        Ok((Tensor::new(vec![n, d], out)?, drawn))
    }

    /// Parameters as tape leaves, in [`Parameterized::params`] order.
    pub fn bind(&self, tape: &mut Tape) -> Vec<Var> {
        self.params().into_iter().map(|p| tape.leaf(p.clone())).collect()
    }

    /// Records `log p(x)` as a `[batch, 1]` node.
    pub fn log_density_on_tape(&self, tape: &mut Tape, params: &[Var], x: &Tensor) -> Result<Var> {
        let (y0, ld0) = self.box_forward(x)?;
        let m = y0.rows();
        let d = self.dim();
        let mut y = tape.constant(y0);
        let mut ld = tape.constant(Tensor::column(ld0));
        let mut k = 0;
        for block in &self.blocks {
            // activation normalization: y ← y ⊙ exp(log_scale) + shift
            let ls = params[k];
            let sh = params[k + 1];
            k += 2;
            let es = tape.exp(ls);
            let esb = tape.broadcast_rows(es, m)?;
            let shb = tape.broadcast_rows(sh, m)?;
            let ym = tape.mul(y, esb)?;
            y = tape.add(ym, shb)?;
            let lss = tape.sum(ls);
            let lsb = tape.broadcast_scalar(lss, &[m, 1])?;
            ld = tape.add(ld, lsb)?;
            for c in &block.couplings {
                let np = c.net.num_layers() * 2;
                let yf = tape.select_cols(y, &c.frozen)?;
                let yt = tape.select_cols(y, &c.active)?;
                let h = c.net.apply(tape, &params[k..k + np], yf)?;
                k += np;
                let na = c.active.len();
                let s_idx: Rc<[usize]> = (0..na).collect();
                let t_idx: Rc<[usize]> = (na..2 * na).collect();
                let raw = tape.select_cols(h, &s_idx)?;
                let t = tape.select_cols(h, &t_idx)?;
                let smax = self.config.scale_max;
                let r = tape.scale(raw, 1.0 / smax);
                let th = tape.tanh(r);
                let s = tape.scale(th, smax);
                let es = tape.exp(s);
                let ytm = tape.mul(yt, es)?;
                let yt2 = tape.add(ytm, t)?;
                let a = tape.scatter_cols(yf, &c.frozen, d)?;
                let b = tape.scatter_cols(yt2, &c.active, d)?;
                y = tape.add(a, b)?;
                let ssum = tape.sum_cols(s)?;
                ld = tape.add(ld, ssum)?;
            }
            y = tape.select_cols(y, &self.perm)?;
        }
        let sq = tape.square(y);
        let ssq = tape.sum_cols(sq)?;
        let half = tape.scale(ssq, -0.5);
        let lp = tape.shift(half, -0.5 * d as f64 * (2.0 * PI).ln());
        Ok(tape.add(lp, ld)?)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let meta = FlowMeta {
            domain: self.domain.clone(),
            config: self.config,
        };
        Checkpoint::from_model(FLOW_KIND, serde_json::to_value(meta).expect("meta serializes"), self)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        ck.check_header(FLOW_KIND)?;
        let meta: FlowMeta = serde_json::from_value(ck.meta.clone()).map_err(CheckpointError::from)?;
        let mut flow = Self::build(meta.domain, meta.config, |widths| {
            Mlp::zeros(&MlpSpec {
                widths: widths.to_vec(),
                hidden: Activation::Relu,
                output: Activation::Identity,
            })
        })?;
        ck.load_into(FLOW_KIND, &mut flow)?;
        Ok(flow)
    }

    /// Per-layer pieces of the map, for testing log-det additivity.
    #[cfg(test)]
    fn layer_log_dets(&self, x: &Tensor) -> Result<Vec<Vec<f64>>> {
        let (mut y, ld0) = self.box_forward(x)?;
        let mut out = vec![ld0];
        for block in &self.blocks {
            let mut ld = vec![0.0; x.rows()];
            block_forward(block, &self.perm, self.config.scale_max, &mut y, &mut ld)?;
            out.push(ld);
        }
        Ok(out)
    }
}

fn log_normal(z: &[f64]) -> f64 {
    -0.5 * z.iter().map(|v| v * v).sum::<f64>() - 0.5 * z.len() as f64 * (2.0 * PI).ln()
}

fn block_forward(block: &Block, perm: &[usize], smax: f64, y: &mut Tensor, ld: &mut [f64]) -> Result<()> {
    let d = y.cols();
    let ls = block.log_scale.data();
    let sh = block.shift.data();
    let ls_sum: f64 = ls.iter().sum();
    for (row, l) in y.data_mut().chunks_mut(d).zip(ld.iter_mut()) {
        for i in 0..d {
            row[i] = row[i] * ls[i].exp() + sh[i];
        }
        *l += ls_sum;
    }
    for c in &block.couplings {
        let yf = y.gather_cols(&c.frozen);
        let h = c.net.forward(&yf)?;
        let na = c.active.len();
        for ((row, hr), l) in y.data_mut().chunks_mut(d).zip(h.iter_rows()).zip(ld.iter_mut()) {
            for (j, &i) in c.active.iter().enumerate() {
                let s = smax * (hr[j] / smax).tanh();
                row[i] = row[i] * s.exp() + hr[na + j];
                *l += s;
            }
        }
    }
    *y = y.gather_cols(perm);
    Ok(())
}

fn block_inverse(block: &Block, inv_perm: &[usize], smax: f64, y: &mut Tensor) -> Result<()> {
    let d = y.cols();
    *y = y.gather_cols(inv_perm);
    for c in block.couplings.iter().rev() {
        let yf = y.gather_cols(&c.frozen);
        let h = c.net.forward(&yf)?;
        let na = c.active.len();
        for (row, hr) in y.data_mut().chunks_mut(d).zip(h.iter_rows()) {
            for (j, &i) in c.active.iter().enumerate() {
                let s = smax * (hr[j] / smax).tanh();
                row[i] = (row[i] - hr[na + j]) * (-s).exp();
            }
        }
    }
    let ls = block.log_scale.data();
    let sh = block.shift.data();
    for row in y.data_mut().chunks_mut(d) {
        for i in 0..d {
            row[i] = (row[i] - sh[i]) * (-ls[i]).exp();
        }
    }
    Ok(())
}

impl Parameterized for FlowModel {
    fn param_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        for (b, block) in self.blocks.iter().enumerate() {
            names.push(format!("block{b}.actnorm.log_scale"));
            names.push(format!("block{b}.actnorm.shift"));
            for (l, c) in block.couplings.iter().enumerate() {
                names.extend(c.net.params_with_prefix(&format!("block{b}.coupling{l}.")));
            }
        }
        names
    }

    fn params(&self) -> Vec<&Tensor> {
        let mut v = Vec::new();
        for block in &self.blocks {
            v.push(&block.log_scale);
            v.push(&block.shift);
            for c in &block.couplings {
                v.extend(c.net.raw_params());
            }
        }
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v = Vec::new();
        for block in &mut self.blocks {
            v.push(&mut block.log_scale);
            v.push(&mut block.shift);
            for c in &mut block.couplings {
                v.extend(c.net.raw_params_mut().iter_mut());
            }
        }
        v
    }
}
