use rand::Rng;
use serde::{Deserialize, Serialize};

use super::graph::{Graph, Var};
use super::params::{ParamId, ParamStore};
use super::tensor::{Real, Tensor};
use super::KernelError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Sigmoid,
    Softplus,
    Tanh,
    None,
}

#[derive(Clone, Debug)]
pub struct Layer {
    pub weight: ParamId,
    pub bias: ParamId,
    pub activation: Activation,
    pub in_dim: usize,
    pub out_dim: usize,
}

/// How the output layer is initialised.
#[derive(Clone, Debug)]
pub struct OutputInit {
    /// Multiplier on the default uniform weight range (0 gives zero weights).
    pub weight_scale: f32,
    /// Constant bias per output unit; `None` keeps zeros.
    pub bias: Option<Vec<f32>>,
}

impl Default for OutputInit {
    fn default() -> Self {
        Self {
            weight_scale: 1.0,
            bias: None,
        }
    }
}

/// A multilayer perceptron whose weights live in a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Mlp {
    pub name: String,
    pub layers: Vec<Layer>,
}

impl Mlp {
    /// `dims` lists every width from input to output; hidden layers use
    /// `hidden`, the last layer uses `output`.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        group: &str,
        dims: &[usize],
        hidden: Activation,
        output: Activation,
        init: OutputInit,
        rng: &mut impl Rng,
    ) -> Result<Self, KernelError> {
        assert!(dims.len() >= 2, "an MLP needs at least one layer");
        let n_layers = dims.len() - 1;
        let mut layers = Vec::with_capacity(n_layers);
        for l in 0..n_layers {
            let (din, dout) = (dims[l], dims[l + 1]);
            let last = l + 1 == n_layers;
            // He-uniform for relu, Glorot-uniform otherwise.
            let act = if last { output } else { hidden };
            let bound = if act == Activation::Relu && !last {
                (6.0 / din.max(1) as f32).sqrt()
            } else {
                (6.0 / (din + dout).max(1) as f32).sqrt()
            };
            let scale = if last { init.weight_scale } else { 1.0 };
            let w: Vec<f32> = (0..din * dout)
                .map(|_| {
                    if scale == 0.0 {
                        0.0
                    } else {
                        rng.gen_range(-bound..bound) * scale
                    }
                })
                .collect();
            let b = match (&init.bias, last) {
                (Some(b), true) => {
                    assert_eq!(b.len(), dout, "output bias length");
                    b.clone()
                }
                _ => vec![0.0; dout],
            };
            let weight = store.add(format!("{name}.l{l}.weight"), group, Tensor::new(vec![din, dout], w)?)?;
            let bias = store.add(format!("{name}.l{l}.bias"), group, Tensor::new(vec![1, dout], b)?)?;
            layers.push(Layer {
                weight,
                bias,
                activation: act,
                in_dim: din,
                out_dim: dout,
            });
        }
        Ok(Self {
            name: name.to_string(),
            layers,
        })
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.out_dim)
    }

    pub fn params(&self) -> Vec<ParamId> {
        self.layers.iter().flat_map(|l| [l.weight, l.bias]).collect()
    }

    /// Forward pass on a `[n, in_dim]` batch.
    pub fn apply<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore,
        input: Var,
    ) -> Result<Var, KernelError> {
        let mut h = input;
        for (i, layer) in self.layers.iter().enumerate() {
            let got = g.value(h).cols();
            if got != layer.in_dim {
                return Err(KernelError::LayerDim {
                    mlp: self.name.clone(),
                    layer: i,
                    expected: layer.in_dim,
                    got,
                });
            }
            let w = g.param(store, layer.weight);
            let b = g.param(store, layer.bias);
            let z = g.matmul(h, w)?;
            let z = g.add_row(z, b)?;
            h = match layer.activation {
                Activation::Relu => g.relu(z),
                Activation::Sigmoid => g.sigmoid(z),
                Activation::Softplus => g.softplus(z),
                Activation::Tanh => g.tanh(z),
                Activation::None => z,
            };
        }
        Ok(h)
    }
}
