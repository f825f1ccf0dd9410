use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Tanh,
    Relu,
    Identity,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => x.tanh(),
            Activation::Relu => x.max(0.0),
            Activation::Identity => x,
        }
    }

    /// Derivative given the pre-activation and the activation output.
    fn derivative(self, pre: f64, post: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - post * post,
            Activation::Relu => {
                if pre > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Identity => 1.0,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Activation::Tanh => "tanh",
            Activation::Relu => "relu",
            Activation::Identity => "identity",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "tanh" => Some(Activation::Tanh),
            "relu" => Some(Activation::Relu),
            "identity" => Some(Activation::Identity),
            _ => None,
        }
    }
}

/// Affine layer `y = act(x W + b)` acting on row-major batches.
/// `weight` is `in × out`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub weight: DMatrix<f64>,
    pub bias: DVector<f64>,
    pub activation: Activation,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseGrad {
    pub weight: DMatrix<f64>,
    pub bias: DVector<f64>,
}

impl Dense {
    /// Glorot-uniform weights, zero bias.
    pub fn glorot<R: Rng>(n_in: usize, n_out: usize, activation: Activation, rng: &mut R) -> Self {
        let limit = (6.0 / (n_in + n_out) as f64).sqrt();
        Dense {
            weight: DMatrix::from_fn(n_in, n_out, |_, _| rng.random_range(-limit..limit)),
            bias: DVector::zeros(n_out),
            activation,
        }
    }

    pub fn n_in(&self) -> usize {
        self.weight.nrows()
    }

    pub fn n_out(&self) -> usize {
        self.weight.ncols()
    }

    fn pre_activation(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let mut pre = x * &self.weight;
        for mut row in pre.row_iter_mut() {
            row += self.bias.transpose();
        }
        pre
    }

    pub fn forward(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let act = self.activation;
        self.pre_activation(x).map(|v| act.apply(v))
    }
}

/// Values recorded on the forward pass for the backward pass.
pub(crate) struct Tape {
    inputs: Vec<DMatrix<f64>>,
    pre: Vec<DMatrix<f64>>,
    post: Vec<DMatrix<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Dense>,
}

impl Mlp {
    /// Layers of the given widths; hidden layers use `hidden`, the last one
    /// is linear.
    pub fn new<R: Rng>(widths: &[usize], hidden: Activation, rng: &mut R) -> Self {
        let n = widths.len().saturating_sub(1);
        let layers = (0..n)
            .map(|i| {
                let act = if i + 1 == n {
                    Activation::Identity
                } else {
                    hidden
                };
                Dense::glorot(widths[i], widths[i + 1], act, rng)
            })
            .collect();
        Mlp { layers }
    }

    pub fn input_dim(&self) -> usize {
        self.layers.first().map_or(0, Dense::n_in)
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(0, Dense::n_out)
    }

    pub fn forward(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        self.layers
            .iter()
            .fold(x.clone(), |h, layer| layer.forward(&h))
    }

    pub(crate) fn forward_tape(&self, x: &DMatrix<f64>) -> (DMatrix<f64>, Tape) {
        let mut tape = Tape {
            inputs: Vec::with_capacity(self.layers.len()),
            pre: Vec::with_capacity(self.layers.len()),
            post: Vec::with_capacity(self.layers.len()),
        };
        let mut h = x.clone();
        for layer in &self.layers {
            let pre = layer.pre_activation(&h);
            let act = layer.activation;
            let post = pre.map(|v| act.apply(v));
            tape.inputs.push(std::mem::replace(&mut h, post.clone()));
            tape.pre.push(pre);
            tape.post.push(post);
        }
        (h, tape)
    }

    /// Pulls `grad_out = ∂L/∂output` back through the network, returning
    /// `∂L/∂input` and the parameter gradients.
    pub(crate) fn backward(
        &self,
        tape: &Tape,
        grad_out: DMatrix<f64>,
    ) -> (DMatrix<f64>, Vec<DenseGrad>) {
        let mut grads = Vec::with_capacity(self.layers.len());
        let mut g = grad_out;
        for (i, layer) in self.layers.iter().enumerate().rev() {
            let act = layer.activation;
            if act != Activation::Identity {
                let pre = &tape.pre[i];
                let post = &tape.post[i];
                for ((gv, &p), &q) in g.iter_mut().zip(pre.iter()).zip(post.iter()) {
                    *gv *= act.derivative(p, q);
                }
            }
            let weight = tape.inputs[i].tr_mul(&g);
            let bias = DVector::from_iterator(g.ncols(), g.column_iter().map(|c| c.sum()));
            grads.push(DenseGrad { weight, bias });
            g = &g * layer.weight.transpose();
        }
        grads.reverse();
        (g, grads)
    }

    pub fn n_params(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weight.len() + l.bias.len())
            .sum()
    }
}
