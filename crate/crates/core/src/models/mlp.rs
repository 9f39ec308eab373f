use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{invalid, Result};
use crate::rng::Rng;
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Sigmoid,
    Identity,
}

/// Dense stack `widths[0] -> ... -> widths[last]`. Parameters are laid out per
/// layer as a row-major `in x out` weight block followed by `out` biases.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub widths: Vec<usize>,
    pub activations: Vec<Activation>,
}

impl MlpSpec {
    /// ReLU after every hidden layer, identity on the output.
    pub fn relu(widths: Vec<usize>) -> Result<Self> {
        let layers = widths.len().saturating_sub(1);
        let activations = (0..layers)
            .map(|i| if i + 1 == layers { Activation::Identity } else { Activation::Relu })
            .collect();
        let spec = Self { widths, activations };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths.len() < 2 {
            return invalid("an MLP needs at least one layer");
        }
        if self.widths.contains(&0) {
            return invalid(format!("MLP widths must be >= 1, got {:?}", self.widths));
        }
        if self.activations.len() != self.widths.len() - 1 {
            return invalid("one activation per layer required");
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.widths[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.widths.last().unwrap()
    }

    pub fn param_count(&self) -> usize {
        self.widths.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }

    /// Uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]` for weights and biases.
    pub fn init<S: Scalar>(&self, rng: &mut Rng) -> Vec<S> {
        let mut out = Vec::with_capacity(self.param_count());
        for w in self.widths.windows(2) {
            let bound = 1.0 / (w[0] as f64).sqrt();
            for _ in 0..(w[0] * w[1] + w[1]) {
                out.push(S::lit(rng.random_range(-bound..=bound)));
            }
        }
        out
    }

    /// Places this stack's parameters on `tape`, as leaves when `trainable`.
    pub fn bind<S: Scalar>(&self, tape: &mut Tape<S>, params: &[S], trainable: bool) -> BoundMlp {
        debug_assert_eq!(params.len(), self.param_count());
        let mut layers = Vec::with_capacity(self.activations.len());
        let mut off = 0;
        for w in self.widths.windows(2) {
            let (fan_in, fan_out) = (w[0], w[1]);
            let wt = Tensor::matrix(fan_in, fan_out, params[off..off + fan_in * fan_out].to_vec())
                .expect("layout");
            off += fan_in * fan_out;
            let bt = Tensor::row(params[off..off + fan_out].to_vec());
            off += fan_out;
            let (wv, bv) = if trainable {
                (tape.leaf(wt), tape.leaf(bt))
            } else {
                (tape.constant(wt), tape.constant(bt))
            };
            layers.push((wv, bv));
        }
        BoundMlp {
            layers,
            activations: self.activations.clone(),
            trainable,
        }
    }
}

/// An MLP whose parameters live on a tape.
#[derive(Debug, Clone)]
pub struct BoundMlp {
    layers: Vec<(Var, Var)>,
    activations: Vec<Activation>,
    trainable: bool,
}

impl BoundMlp {
    pub fn forward<S: Scalar>(&self, tape: &mut Tape<S>, x: Var) -> Result<Var> {
        let mut h = x;
        for (&(w, b), act) in self.layers.iter().zip(&self.activations) {
            let z = tape.matmul(h, w)?;
            let z = tape.add_row(z, b)?;
            h = match act {
                Activation::Relu => tape.relu(z),
                Activation::Sigmoid => tape.sigmoid(z),
                Activation::Identity => z,
            };
        }
        Ok(h)
    }

    pub fn is_trainable(&self) -> bool {
        self.trainable
    }

    /// Writes this stack's gradient into `out` (same layout as the params).
    pub fn write_grad<S: Scalar>(&self, tape: &Tape<S>, out: &mut [S]) {
        let mut off = 0;
        for &(w, b) in &self.layers {
            for v in [w, b] {
                let n = tape.value(v).numel();
                match tape.grad(v) {
                    Some(g) => out[off..off + n].copy_from_slice(g),
                    None => out[off..off + n].fill(S::zero()),
                }
                off += n;
            }
        }
    }
}
