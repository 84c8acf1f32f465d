use rand::Rng;
use serde::{Deserialize, Serialize};

use super::tape::{Tape, Var};
use super::tensor::{sigmoid, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Sigmoid,
    Identity,
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Sigmoid => sigmoid(x),
            Activation::Identity => x,
        }
    }

    fn apply_tape(self, tape: &mut Tape, v: Var) -> Var {
        match self {
            Activation::Relu => tape.relu(v),
            Activation::Sigmoid => tape.sigmoid(v),
            Activation::Identity => v,
        }
    }
}

/// One affine layer `y = act(x·W + b)` with `W: [in, out]` and `b: [1, out]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub weight: Tensor,
    pub bias: Tensor,
    pub activation: Activation,
}

impl Dense {
    /// Glorot-uniform weights, zero bias.
    pub fn init<R: Rng + ?Sized>(in_dim: usize, out_dim: usize, activation: Activation, rng: &mut R) -> Self {
        let a = (6.0 / (in_dim + out_dim) as f64).sqrt();
        let data = (0..in_dim * out_dim).map(|_| rng.random_range(-a..a)).collect();
        Dense {
            weight: Tensor::matrix(in_dim, out_dim, data).expect("sized by construction"),
            bias: Tensor::zeros(1, out_dim),
            activation,
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut z = x.matmul(&self.weight)?;
        let c = z.cols();
        let b = self.bias.data();
        for (i, v) in z.data_mut().iter_mut().enumerate() {
            *v = self.activation.apply(*v + b[i % c]);
        }
        Ok(z)
    }
}

/// Multi-layer perceptron.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    layers: Vec<Dense>,
}

impl Mlp {
    pub fn from_layers(layers: Vec<Dense>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::invalid("an Mlp needs at least one layer"));
        }
        for (i, pair) in layers.windows(2).enumerate() {
            if pair[0].out_dim() != pair[1].in_dim() {
                return Err(Error::shape(
                    "Mlp::from_layers",
                    format!("layer {i} outputs {} but layer {} expects {}", pair[0].out_dim(), i + 1, pair[1].in_dim()),
                ));
            }
        }
        for (i, l) in layers.iter().enumerate() {
            if l.bias.shape() != [1, l.out_dim()] {
                return Err(Error::shape("Mlp::from_layers", format!("bad bias shape in layer {i}")));
            }
        }
        Ok(Mlp { layers })
    }

    /// Builds `dims[0] → dims[1] → … → dims[n]` with `hidden` activations
    /// between layers and `output` on the last.
    pub fn new<R: Rng + ?Sized>(dims: &[usize], hidden: Activation, output: Activation, rng: &mut R) -> Result<Self> {
        if dims.len() < 2 {
            return Err(Error::invalid("need at least input and output dimension"));
        }
        let n = dims.len() - 1;
        let layers = (0..n)
            .map(|i| {
                let act = if i + 1 == n { output } else { hidden };
                Dense::init(dims[i], dims[i + 1], act, rng)
            })
            .collect();
        Self::from_layers(layers)
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim()
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (_, d) = x.dims2()?;
        if d != self.input_dim() {
            return Err(Error::shape(
                "Mlp::forward",
                format!("input has {d} columns, network expects {}", self.input_dim()),
            ));
        }
        let mut h = self.layers[0].forward(x)?;
        for layer in &self.layers[1..] {
            h = layer.forward(&h)?;
        }
        Ok(h)
    }

    /// Parameters in binding order: `w0, b0, w1, b1, …`.
    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers.iter_mut().flat_map(|l| [&mut l.weight, &mut l.bias]).collect()
    }

    pub fn params(&self) -> Vec<&Tensor> {
        self.layers.iter().flat_map(|l| [&l.weight, &l.bias]).collect()
    }

    pub fn param_names(&self, prefix: &str) -> Vec<String> {
        (0..self.layers.len())
            .flat_map(|i| [format!("{prefix}.layer{i}.weight"), format!("{prefix}.layer{i}.bias")])
            .collect()
    }

    /// Places the parameters on `tape` as trainable leaves.
    pub fn bind(&self, tape: &mut Tape) -> BoundMlp {
        self.bind_with(tape, true)
    }

    /// Places the parameters on `tape` as constants.
    pub fn bind_frozen(&self, tape: &mut Tape) -> BoundMlp {
        self.bind_with(tape, false)
    }

    fn bind_with(&self, tape: &mut Tape, trainable: bool) -> BoundMlp {
        let layers = self
            .layers
            .iter()
            .map(|l| {
                let (w, b) = if trainable {
                    (tape.param(l.weight.clone()), tape.param(l.bias.clone()))
                } else {
                    (tape.constant(l.weight.clone()), tape.constant(l.bias.clone()))
                };
                (w, b, l.activation)
            })
            .collect();
        BoundMlp { layers, input_dim: self.input_dim() }
    }
}

/// An [`Mlp`] whose parameters live on a tape.
pub struct BoundMlp {
    layers: Vec<(Var, Var, Activation)>,
    input_dim: usize,
}

impl BoundMlp {
    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let d = tape.value(x).cols();
        if d != self.input_dim {
            return Err(Error::shape(
                "BoundMlp::forward",
                format!("input has {d} columns, network expects {}", self.input_dim),
            ));
        }
        let mut h = x;
        for &(w, b, act) in &self.layers {
            let z = tape.matmul(h, w)?;
            let z = tape.add_row(z, b)?;
            h = act.apply_tape(tape, z);
        }
        Ok(h)
    }

    /// Layer-by-layer forward for the first `n` layers only.
    pub fn forward_prefix(&self, tape: &mut Tape, x: Var, n: usize) -> Result<Var> {
        let mut h = x;
        for &(w, b, act) in self.layers.iter().take(n) {
            let z = tape.matmul(h, w)?;
            let z = tape.add_row(z, b)?;
            h = act.apply_tape(tape, z);
        }
        Ok(h)
    }

    pub fn forward_suffix(&self, tape: &mut Tape, h: Var, from: usize) -> Result<Var> {
        let mut h = h;
        for &(w, b, act) in self.layers.iter().skip(from) {
            let z = tape.matmul(h, w)?;
            let z = tape.add_row(z, b)?;
            h = act.apply_tape(tape, z);
        }
        Ok(h)
    }

    pub fn vars(&self) -> Vec<Var> {
        self.layers.iter().flat_map(|&(w, b, _)| [w, b]).collect()
    }
}
