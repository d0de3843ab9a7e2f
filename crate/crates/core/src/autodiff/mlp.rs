//! Fully connected networks on top of the tape.
//!
//! Weights are stored `[in, out]` so a layer computes `x W + b` with the
//! bias broadcast over rows. Hidden layers apply the shared activation;
//! the last layer returns raw logits.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::tape::{Gradients, Tape, Var};
use super::tensor::{add_kernel, matmul_kernel, relu, Tensor};
use crate::error::{invalid, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Tanh,
}

impl Activation {
    pub fn name(self) -> &'static str {
        match self {
            Activation::Relu => "relu",
            Activation::Tanh => "tanh",
        }
    }

    fn apply_value(self, v: f64) -> f64 {
        match self {
            Activation::Relu => relu(v),
            Activation::Tanh => v.tanh(),
        }
    }

    fn record(self, tape: &mut Tape, x: Var) -> Result<Var> {
        match self {
            Activation::Relu => tape.relu(x),
            Activation::Tanh => tape.tanh(x),
        }
    }
}

impl std::fmt::Display for Activation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "relu" => Ok(Activation::Relu),
            "tanh" => Ok(Activation::Tanh),
            other => Err(Error::Parse(format!("unknown activation `{other}`"))),
        }
    }
}

/// Parameters of a multilayer perceptron.
#[derive(Clone, Debug, PartialEq)]
pub struct MlpParams {
    layer_dims: Vec<usize>,
    activation: Activation,
    weights: Vec<Tensor>,
    biases: Vec<Tensor>,
}

impl MlpParams {
    /// Uniform init in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]` for weights and biases.
    pub fn init<R: Rng + ?Sized>(
        layer_dims: &[usize],
        activation: Activation,
        rng: &mut R,
    ) -> Result<Self> {
        check_dims(layer_dims)?;
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for pair in layer_dims.windows(2) {
            let (fan_in, fan_out) = (pair[0], pair[1]);
            let bound = 1.0 / (fan_in as f64).sqrt();
            let mut draw = |n: usize| -> Vec<f64> {
                (0..n)
                    .map(|_| bound * (2.0 * rng.gen::<f64>() - 1.0))
                    .collect()
            };
            weights.push(Tensor::new(fan_in, fan_out, draw(fan_in * fan_out))?);
            biases.push(Tensor::new(1, fan_out, draw(fan_out))?);
        }
        Ok(Self {
            layer_dims: layer_dims.to_vec(),
            activation,
            weights,
            biases,
        })
    }

    pub fn zeros(layer_dims: &[usize], activation: Activation) -> Result<Self> {
        check_dims(layer_dims)?;
        let weights = layer_dims
            .windows(2)
            .map(|p| Tensor::zeros(p[0], p[1]))
            .collect();
        let biases = layer_dims[1..]
            .iter()
            .map(|&d| Tensor::zeros(1, d))
            .collect();
        Ok(Self {
            layer_dims: layer_dims.to_vec(),
            activation,
            weights,
            biases,
        })
    }

    /// Assembles parameters, checking every shape against `layer_dims`.
    pub fn from_parts(
        layer_dims: Vec<usize>,
        activation: Activation,
        weights: Vec<Tensor>,
        biases: Vec<Tensor>,
    ) -> Result<Self> {
        check_dims(&layer_dims)?;
        let layers = layer_dims.len() - 1;
        if weights.len() != layers || biases.len() != layers {
            return Err(invalid(format!(
                "expected {layers} weight and bias tensors, got {} and {}",
                weights.len(),
                biases.len()
            )));
        }
        for (l, pair) in layer_dims.windows(2).enumerate() {
            let w = &weights[l];
            if w.rows() != pair[0] || w.cols() != pair[1] {
                return Err(Error::Shape {
                    op: "mlp_weight",
                    lhs: w.shape(),
                    rhs: pair.to_vec(),
                });
            }
            let b = &biases[l];
            if b.rows() != 1 || b.cols() != pair[1] {
                return Err(Error::Shape {
                    op: "mlp_bias",
                    lhs: b.shape(),
                    rhs: vec![1, pair[1]],
                });
            }
        }
        Ok(Self {
            layer_dims,
            activation,
            weights,
            biases,
        })
    }

    pub fn layer_dims(&self) -> &[usize] {
        &self.layer_dims
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn num_layers(&self) -> usize {
        self.weights.len()
    }

    pub fn input_dim(&self) -> usize {
        self.layer_dims[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_dims.last().expect("at least two dims")
    }

    pub fn weights(&self) -> &[Tensor] {
        &self.weights
    }

    pub fn biases(&self) -> &[Tensor] {
        &self.biases
    }

    pub fn weights_mut(&mut self) -> &mut [Tensor] {
        &mut self.weights
    }

    pub fn biases_mut(&mut self) -> &mut [Tensor] {
        &mut self.biases
    }

    pub fn num_params(&self) -> usize {
        self.weights
            .iter()
            .chain(&self.biases)
            .map(Tensor::len)
            .sum()
    }

    /// Parameters in layer order: `w0, b0, w1, b1, ...`.
    pub fn tensors(&self) -> Vec<&Tensor> {
        self.weights
            .iter()
            .zip(&self.biases)
            .flat_map(|(w, b)| [w, b])
            .collect()
    }

    pub fn is_finite(&self) -> bool {
        self.weights
            .iter()
            .chain(&self.biases)
            .all(Tensor::is_finite)
    }

    /// Records the parameters as leaves on `tape`.
    pub fn bind(&self, tape: &mut Tape) -> BoundMlp {
        let weights = self.weights.iter().map(|w| tape.leaf(w.clone())).collect();
        let biases = self.biases.iter().map(|b| tape.leaf(b.clone())).collect();
        BoundMlp {
            weights,
            biases,
            activation: self.activation,
        }
    }

    /// Forward pass without a tape. Uses the same kernels as the taped
    /// path, so the logits are bit-identical to [`mlp_forward`].
    pub fn forward_values(&self, x: &Tensor) -> Result<Tensor> {
        self.check_input(x)?;
        let mut h = x.clone();
        let last = self.num_layers() - 1;
        for l in 0..=last {
            h = add_kernel(&matmul_kernel(&h, &self.weights[l])?, &self.biases[l])?;
            if l < last {
                h = h.map(|v| self.activation.apply_value(v));
            }
        }
        if !h.is_finite() {
            return Err(Error::NonFinite { op: "mlp_forward" });
        }
        Ok(h)
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        if x.cols() != self.input_dim() {
            return Err(Error::Shape {
                op: "mlp_forward",
                lhs: x.shape(),
                rhs: vec![x.rows(), self.input_dim()],
            });
        }
        Ok(())
    }
}

fn check_dims(layer_dims: &[usize]) -> Result<()> {
    if layer_dims.len() < 2 {
        return Err(invalid(
            "an MLP needs at least an input and an output width",
        ));
    }
    if layer_dims.contains(&0) {
        return Err(invalid(format!("zero layer width in {layer_dims:?}")));
    }
    Ok(())
}

/// Handles of an [`MlpParams`] recorded on a tape.
#[derive(Clone, Debug)]
pub struct BoundMlp {
    pub weights: Vec<Var>,
    pub biases: Vec<Var>,
    pub activation: Activation,
}

impl BoundMlp {
    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let in_dim = tape.value(self.weights[0]).rows();
        let xv = tape.value(x);
        if xv.cols() != in_dim {
            return Err(Error::Shape {
                op: "mlp_forward",
                lhs: xv.shape(),
                rhs: vec![xv.rows(), in_dim],
            });
        }
        let last = self.weights.len() - 1;
        let mut h = x;
        for l in 0..=last {
            let z = tape.matmul(h, self.weights[l])?;
            h = tape.add(z, self.biases[l])?;
            if l < last {
                h = self.activation.record(tape, h)?;
            }
        }
        Ok(h)
    }

    /// Collects parameter gradients in the same layout as the params.
    pub fn grads(&self, grads: &Gradients) -> MlpGrads {
        MlpGrads {
            weights: self.weights.iter().map(|&v| grads.get(v).clone()).collect(),
            biases: self.biases.iter().map(|&v| grads.get(v).clone()).collect(),
        }
    }
}

/// Records `params` on `tape` and applies them to `x`.
pub fn mlp_forward(tape: &mut Tape, params: &MlpParams, x: Var) -> Result<(BoundMlp, Var)> {
    params.check_input(tape.value(x))?;
    let bound = params.bind(tape);
    let out = bound.forward(tape, x)?;
    Ok((bound, out))
}

/// Gradients with the layout of an [`MlpParams`].
#[derive(Clone, Debug, PartialEq)]
pub struct MlpGrads {
    pub weights: Vec<Tensor>,
    pub biases: Vec<Tensor>,
}

impl MlpGrads {
    pub fn zeros_like(params: &MlpParams) -> Self {
        Self {
            weights: params
                .weights
                .iter()
                .map(|w| Tensor::zeros(w.rows(), w.cols()))
                .collect(),
            biases: params
                .biases
                .iter()
                .map(|b| Tensor::zeros(b.rows(), b.cols()))
                .collect(),
        }
    }

    pub fn tensors(&self) -> impl Iterator<Item = &Tensor> {
        self.weights.iter().chain(&self.biases)
    }

    pub fn sum_squares(&self) -> f64 {
        self.tensors().map(Tensor::sum_squares).sum()
    }

    pub fn norm(&self) -> f64 {
        self.sum_squares().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().all(Tensor::is_finite)
    }

    /// Flattened in `w0, b0, w1, b1, ...` order.
    pub fn flatten(&self) -> Vec<f64> {
        self.weights
            .iter()
            .zip(&self.biases)
            .flat_map(|(w, b)| w.data().iter().chain(b.data()).copied())
            .collect()
    }
}
