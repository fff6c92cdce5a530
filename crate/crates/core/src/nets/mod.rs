//! Committor network and autoencoder.
//!
//! Layer counts follow the number of weight matrices: a "four-layer" net with
//! 100 neurons on a 10-D input has widths `[10, 100, 100, 100, 1]`.

mod mlp;

pub use mlp::{Activation, Mlp, MlpSpec};

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AutodiffError, Tape, Tensor, Var};
use crate::checkpoint::{Checkpoint, CheckpointError, Parameterized};

#[derive(Debug, Error)]
pub enum NetError {
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error("input has shape {got:?}, expected [batch, {expected}]")]
    Dimension { expected: usize, got: Vec<usize> },
    #[error("bad architecture: {0}")]
    Architecture(String),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

pub type Result<T> = std::result::Result<T, NetError>;

/// A differentiable scalar field `q(x)` on `R^d`.
pub trait CommittorModel: Parameterized {
    fn dim(&self) -> usize;

    /// Records `q(x)` for `x: [batch, d]` as a `[batch, 1]` node.
    fn apply(&self, tape: &mut Tape, params: &[Var], x: Var) -> Result<Var>;

    fn bind(&self, tape: &mut Tape) -> Vec<Var> {
        self.params().into_iter().map(|p| tape.leaf(p.clone())).collect()
    }

    /// `q(x)` per row, without keeping a tape.
    fn values(&self, x: &Tensor) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let params: Vec<Var> = self.params().into_iter().map(|p| tape.constant(p.clone())).collect();
        let xv = tape.constant(x.clone());
        let q = self.apply(&mut tape, &params, xv)?;
        Ok(tape.value(q).data().to_vec())
    }
}

/// Records `q(x)` and `∇ₓq(x)` for a batch. The gradient node depends on
/// `params`, so a loss built from it can be differentiated w.r.t. them.
pub fn value_and_input_grad<M: CommittorModel + ?Sized>(
    model: &M,
    tape: &mut Tape,
    params: &[Var],
    x: &Tensor,
) -> Result<(Var, Var)> {
    let xv = tape.leaf(x.clone());
    let q = model.apply(tape, params, xv)?;
    // rows are independent, so d(sum q)/dx holds each row's own gradient
    let s = tape.sum(q);
    let g = tape.grad(s, &[xv])?[0];
    Ok((q, g))
}

/// `∇ₓq(x)` per row as a plain `[batch, d]` tensor.
pub fn input_gradient<M: CommittorModel + ?Sized>(model: &M, x: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let params: Vec<Var> = model.params().into_iter().map(|p| tape.constant(p.clone())).collect();
    let (_, g) = value_and_input_grad(model, &mut tape, &params, x)?;
    Ok(tape.value(g).clone())
}

/// `q_θ(x) = sigmoid(MLP(x))`.
#[derive(Debug, Clone, PartialEq)]
pub struct CommittorNet {
    mlp: Mlp,
}

pub const COMMITTOR_KIND: &str = "committor-net";

impl CommittorNet {
    /// `hidden` lists the hidden widths, e.g. `[100, 100, 100]`.
    pub fn new<R: Rng + ?Sized>(dim: usize, hidden: &[usize], activation: Activation, rng: &mut R) -> Result<Self> {
        let mut widths = vec![dim];
        widths.extend_from_slice(hidden);
        widths.push(1);
        Ok(Self {
            mlp: Mlp::new(&widths, activation, Activation::Sigmoid, rng)?,
        })
    }

    pub fn mlp(&self) -> &Mlp {
        &self.mlp
    }

    pub fn zero_output_layer(&mut self) {
        self.mlp.zero_output_layer();
    }

    /// `q` per row, computed without a tape.
    pub fn forward(&self, x: &Tensor) -> Result<Vec<f64>> {
        Ok(self.mlp.forward(x)?.into_data())
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let meta = serde_json::to_value(self.mlp.spec()).expect("spec serializes");
        Checkpoint::from_model(COMMITTOR_KIND, meta, self)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        ck.check_header(COMMITTOR_KIND)?;
        let spec: MlpSpec = serde_json::from_value(ck.meta.clone()).map_err(CheckpointError::from)?;
        if spec.output != Activation::Sigmoid || spec.widths.last() != Some(&1) {
            return Err(NetError::Architecture("committor net needs one sigmoid output".into()));
        }
        let mut net = Self { mlp: Mlp::zeros(&spec)? };
        ck.load_into(COMMITTOR_KIND, &mut net)?;
        Ok(net)
    }
}

impl Parameterized for CommittorNet {
    fn param_names(&self) -> Vec<String> {
        self.mlp.param_names()
    }

    fn params(&self) -> Vec<&Tensor> {
        self.mlp.params()
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.mlp.params_mut()
    }
}

impl CommittorModel for CommittorNet {
    fn dim(&self) -> usize {
        self.mlp.input_dim()
    }

    fn apply(&self, tape: &mut Tape, params: &[Var], x: Var) -> Result<Var> {
        self.mlp.apply(tape, params, x)
    }

    fn values(&self, x: &Tensor) -> Result<Vec<f64>> {
        self.forward(x)
    }
}

/// Encoder `R^n -> R^k` and decoder `R^k -> R^n` with linear output layers.
#[derive(Debug, Clone, PartialEq)]
pub struct Autoencoder {
    encoder: Mlp,
    decoder: Mlp,
}

pub const AUTOENCODER_KIND: &str = "autoencoder";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct AutoencoderSpec {
    encoder: MlpSpec,
    decoder: MlpSpec,
}

impl Autoencoder {
    /// `encoder_widths = [n, .., k]`, `decoder_widths = [k, .., n]`.
    pub fn new<R: Rng + ?Sized>(
        encoder_widths: &[usize],
        decoder_widths: &[usize],
        activation: Activation,
        rng: &mut R,
    ) -> Result<Self> {
        let encoder = Mlp::new(encoder_widths, activation, Activation::Identity, rng)?;
        let decoder = Mlp::new(decoder_widths, activation, Activation::Identity, rng)?;
        Self::from_parts(encoder, decoder)
    }

    fn from_parts(encoder: Mlp, decoder: Mlp) -> Result<Self> {
        if encoder.output_dim() != decoder.input_dim() || decoder.output_dim() != encoder.input_dim() {
            return Err(NetError::Architecture(format!(
                "encoder {:?} and decoder {:?} do not compose",
                encoder.widths(),
                decoder.widths()
            )));
        }
        Ok(Self { encoder, decoder })
    }

    pub fn input_dim(&self) -> usize {
        self.encoder.input_dim()
    }

    pub fn latent_dim(&self) -> usize {
        self.encoder.output_dim()
    }

    pub fn encoder(&self) -> &Mlp {
        &self.encoder
    }

    pub fn decoder(&self) -> &Mlp {
        &self.decoder
    }

    pub fn encode(&self, x: &Tensor) -> Result<Tensor> {
        self.encoder.forward(x)
    }

    pub fn decode(&self, s: &Tensor) -> Result<Tensor> {
        self.decoder.forward(s)
    }

    /// Records `decode(encode(x))` with bound parameters (encoder first).
    pub fn apply(&self, tape: &mut Tape, params: &[Var], x: Var) -> Result<Var> {
        let ne = self.encoder.raw_params().len();
        let s = self.encoder.apply(tape, &params[..ne], x)?;
        self.decoder.apply(tape, &params[ne..], s)
    }

    pub fn bind(&self, tape: &mut Tape) -> Vec<Var> {
        let mut v = self.encoder.bind(tape);
        v.extend(self.decoder.bind(tape));
        v
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let spec = AutoencoderSpec {
            encoder: self.encoder.spec(),
            decoder: self.decoder.spec(),
        };
        let meta = serde_json::to_value(spec).expect("spec serializes");
        Checkpoint::from_model(AUTOENCODER_KIND, meta, self)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        ck.check_header(AUTOENCODER_KIND)?;
        let spec: AutoencoderSpec = serde_json::from_value(ck.meta.clone()).map_err(CheckpointError::from)?;
        let mut ae = Self::from_parts(Mlp::zeros(&spec.encoder)?, Mlp::zeros(&spec.decoder)?)?;
        ck.load_into(AUTOENCODER_KIND, &mut ae)?;
        Ok(ae)
    }
}

impl Parameterized for Autoencoder {
    fn param_names(&self) -> Vec<String> {
        let mut v = self.encoder.params_with_prefix("encoder.");
        v.extend(self.decoder.params_with_prefix("decoder."));
        v
    }

    fn params(&self) -> Vec<&Tensor> {
        self.encoder.raw_params().iter().chain(self.decoder.raw_params()).collect()
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let (e, d) = (&mut self.encoder, &mut self.decoder);
        e.raw_params_mut().iter_mut().chain(d.raw_params_mut().iter_mut()).collect()
    }
}
