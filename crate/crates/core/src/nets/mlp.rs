use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{NetError, Result};
use crate::autodiff::{sigmoid, Tape, Tensor, Var};
use crate::checkpoint::Parameterized;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Activation {
    Tanh,
    /// `tanh(x)^2`
    TanhSquared,
    Sigmoid,
    Relu,
    /// `x * sigmoid(x)`
    Swish,
    Identity,
}

impl Activation {
    pub fn apply(self, tape: &mut Tape, x: Var) -> Result<Var> {
        Ok(match self {
            Activation::Tanh => tape.tanh(x),
            Activation::TanhSquared => {
                let t = tape.tanh(x);
                tape.square(t)
            }
            Activation::Sigmoid => tape.sigmoid(x),
            Activation::Relu => tape.relu(x),
            Activation::Swish => tape.swish(x)?,
            Activation::Identity => x,
        })
    }

    pub fn eval(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => x.tanh(),
            Activation::TanhSquared => x.tanh().powi(2),
            Activation::Sigmoid => sigmoid(x),
            Activation::Relu => x.max(0.0),
            Activation::Swish => x * sigmoid(x),
            Activation::Identity => x,
        }
    }
}

/// Fully connected network. `widths = [in, h1, .., out]`; the number of
/// weight layers is `widths.len() - 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    widths: Vec<usize>,
    hidden: Activation,
    output: Activation,
    /// `[w0, b0, w1, b1, ..]` with `w: [in, out]`, `b: [1, out]`.
    params: Vec<Tensor>,
}

impl Mlp {
    /// Glorot-uniform weights, zero biases.
    pub fn new<R: Rng + ?Sized>(
        widths: &[usize],
        hidden: Activation,
        output: Activation,
        rng: &mut R,
    ) -> Result<Self> {
        if widths.len() < 2 || widths.contains(&0) {
            return Err(NetError::Architecture(format!("invalid layer widths {widths:?}")));
        }
        let mut params = Vec::with_capacity(2 * (widths.len() - 1));
        for w in widths.windows(2) {
            let (fan_in, fan_out) = (w[0], w[1]);
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let data = (0..fan_in * fan_out).map(|_| rng.random_range(-limit..limit)).collect();
            params.push(Tensor::new(vec![fan_in, fan_out], data)?);
            params.push(Tensor::zeros(&[1, fan_out]));
        }
        Ok(Self {
            widths: widths.to_vec(),
            hidden,
            output,
            params,
        })
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn input_dim(&self) -> usize {
        self.widths[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.widths.last().unwrap()
    }

    pub fn num_layers(&self) -> usize {
        self.widths.len() - 1
    }

    pub fn hidden_activation(&self) -> Activation {
        self.hidden
    }

    pub fn output_activation(&self) -> Activation {
        self.output
    }

    /// Sets the last layer's weights and bias to zero.
    pub fn zero_output_layer(&mut self) {
        let n = self.params.len();
        for t in &mut self.params[n - 2..] {
            t.data_mut().fill(0.0);
        }
    }

    /// Records the parameters on `tape` as leaves.
    pub fn bind(&self, tape: &mut Tape) -> Vec<Var> {
        self.params.iter().map(|p| tape.leaf(p.clone())).collect()
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        if x.rank() != 2 || x.cols() != self.input_dim() {
            return Err(NetError::Dimension {
                expected: self.input_dim(),
                got: x.shape().to_vec(),
            });
        }
        Ok(())
    }

    /// Forward pass on the tape using previously bound parameters.
    pub fn apply(&self, tape: &mut Tape, params: &[Var], x: Var) -> Result<Var> {
        self.check_input(tape.value(x))?;
        let layers = self.num_layers();
        let mut h = x;
        for l in 0..layers {
            h = tape.linear(h, params[2 * l], params[2 * l + 1])?;
            let act = if l + 1 == layers { self.output } else { self.hidden };
            h = act.apply(tape, h)?;
        }
        Ok(h)
    }

    /// Forward pass on plain tensors, without recording.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.check_input(x)?;
        let layers = self.num_layers();
        let mut h = x.clone();
        for l in 0..layers {
            let mut z = h.matmul(&self.params[2 * l])?;
            let b = self.params[2 * l + 1].data();
            let act = if l + 1 == layers { self.output } else { self.hidden };
            for row in z.data_mut().chunks_mut(b.len()) {
                for (v, bi) in row.iter_mut().zip(b) {
                    *v = act.eval(*v + bi);
                }
            }
            h = z;
        }
        Ok(h)
    }

    pub(crate) fn params_with_prefix(&self, prefix: &str) -> Vec<String> {
        (0..self.num_layers())
            .flat_map(|l| [format!("{prefix}layer{l}.weight"), format!("{prefix}layer{l}.bias")])
            .collect()
    }

    pub(crate) fn raw_params(&self) -> &[Tensor] {
        &self.params
    }

    pub(crate) fn raw_params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }
}

impl Parameterized for Mlp {
    fn param_names(&self) -> Vec<String> {
        self.params_with_prefix("")
    }

    fn params(&self) -> Vec<&Tensor> {
        self.params.iter().collect()
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.params.iter_mut().collect()
    }
}

/// Architecture of an [`Mlp`], stored in checkpoint metadata.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MlpSpec {
    pub widths: Vec<usize>,
    pub hidden: Activation,
    pub output: Activation,
}

impl Mlp {
    pub fn spec(&self) -> MlpSpec {
        MlpSpec {
            widths: self.widths.clone(),
            hidden: self.hidden,
            output: self.output,
        }
    }

    /// All-zero network with the given architecture.
    pub fn zeros(spec: &MlpSpec) -> Result<Self> {
        if spec.widths.len() < 2 || spec.widths.contains(&0) {
            return Err(NetError::Architecture(format!("invalid layer widths {:?}", spec.widths)));
        }
        let params = spec
            .widths
            .windows(2)
            .flat_map(|w| [Tensor::zeros(&[w[0], w[1]]), Tensor::zeros(&[1, w[1]])])
            .collect();
        Ok(Self {
            widths: spec.widths.clone(),
            hidden: spec.hidden,
            output: spec.output,
            params,
        })
    }
}
