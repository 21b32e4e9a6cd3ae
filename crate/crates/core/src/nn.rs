//! Multilayer perceptrons built from affine layers and pointwise activations.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, ParamId, Var};
use crate::error::{CcdError, Result};
use crate::rng::Rng;
use crate::tensor::Tensor2;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Activation {
    Identity,
    Relu,
    LeakyRelu(f64),
}

impl Activation {
    pub fn apply(self, v: f64) -> f64 {
        match self {
            Activation::Identity => v,
            Activation::Relu => v.max(0.0),
            Activation::LeakyRelu(s) => {
                if v > 0.0 {
                    v
                } else {
                    s * v
                }
            }
        }
    }

    fn tape(self, g: &mut Graph, x: Var) -> Var {
        match self {
            Activation::Identity => x,
            Activation::Relu => g.relu(x),
            Activation::LeakyRelu(s) => g.leaky_relu(x, s),
        }
    }
}

/// `y = act(x · weight + bias)`, weight stored `in x out`.
#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    pub weight: Tensor2,
    pub bias: Tensor2,
    pub activation: Activation,
}

impl Layer {
    /// Glorot-uniform weights, zero bias.
    pub fn init(fan_in: usize, fan_out: usize, activation: Activation, rng: &mut Rng) -> Self {
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        Layer {
            weight: rng.uniform_tensor(fan_in, fan_out, -limit, limit),
            bias: Tensor2::zeros(1, fan_out),
            activation,
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.cols()
    }
}

/// Graph handles for one layer's parameters.
#[derive(Clone, Copy, Debug)]
pub struct BoundLayer {
    pub weight: Var,
    pub bias: Var,
    pub activation: Activation,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Layer>,
}

impl Mlp {
    /// `dims = [in, h1, ..., out]`. Hidden layers use `hidden`, the last
    /// layer uses `output`.
    pub fn new(dims: &[usize], hidden: Activation, output: Activation, rng: &mut Rng) -> Result<Self> {
        if dims.len() < 2 || dims.contains(&0) {
            return Err(CcdError::validation(format!("invalid mlp dims {dims:?}")));
        }
        let n = dims.len() - 1;
        let layers = (0..n)
            .map(|i| {
                let act = if i + 1 == n { output } else { hidden };
                Layer::init(dims[i], dims[i + 1], act, rng)
            })
            .collect();
        Ok(Mlp { layers })
    }

    pub fn from_layers(layers: Vec<Layer>) -> Result<Self> {
        for w in layers.windows(2) {
            if w[0].out_dim() != w[1].in_dim() {
                return Err(CcdError::dim("mlp chain", w[0].weight.shape(), w[1].weight.shape()));
            }
        }
        for l in &layers {
            if l.bias.shape() != (1, l.out_dim()) {
                return Err(CcdError::dim("mlp bias", l.weight.shape(), l.bias.shape()));
            }
        }
        Ok(Mlp { layers })
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn out_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim()
    }

    /// Number of parameter tensors (weight and bias per layer).
    pub fn n_tensors(&self) -> usize {
        2 * self.layers.len()
    }

    pub fn tensors(&self) -> impl Iterator<Item = &Tensor2> {
        self.layers.iter().flat_map(|l| [&l.weight, &l.bias])
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor2> {
        self.layers.iter_mut().flat_map(|l| [&mut l.weight, &mut l.bias])
    }

    /// Registers the parameters as trainable leaves with ids
    /// `first_id, first_id + 1, ...` in [`Mlp::tensors`] order.
    pub fn bind(&self, g: &mut Graph, first_id: usize) -> Vec<BoundLayer> {
        self.layers
            .iter()
            .enumerate()
            .map(|(i, l)| BoundLayer {
                weight: g.param(ParamId(first_id + 2 * i), l.weight.clone()),
                bias: g.param(ParamId(first_id + 2 * i + 1), l.bias.clone()),
                activation: l.activation,
            })
            .collect()
    }

    /// Places the parameters on the graph as constants.
    pub fn bind_frozen(&self, g: &mut Graph) -> Vec<BoundLayer> {
        self.layers
            .iter()
            .map(|l| BoundLayer {
                weight: g.constant(l.weight.clone()),
                bias: g.constant(l.bias.clone()),
                activation: l.activation,
            })
            .collect()
    }

    /// Untaped forward pass.
    pub fn apply(&self, x: &Tensor2) -> Result<Tensor2> {
        let mut h = x.clone();
        for l in &self.layers {
            let act = l.activation;
            h = h.matmul(&l.weight)?.add_row(&l.bias)?.map(|v| act.apply(v));
        }
        Ok(h)
    }
}

/// Taped forward pass through bound layers. Fails with a numeric error
/// naming the first layer whose output is not finite.
pub fn mlp_forward(g: &mut Graph, layers: &[BoundLayer], x: Var) -> Result<Var> {
    let mut h = x;
    for (i, l) in layers.iter().enumerate() {
        let z = g.matmul(h, l.weight)?;
        let z = g.add_row(z, l.bias)?;
        h = l.activation.tape(g, z);
        if !g.value(h).is_finite() {
            return Err(CcdError::numeric(format!("non-finite activation at layer {i}")));
        }
    }
    Ok(h)
}
