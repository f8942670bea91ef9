//! Feed-forward classifier with rectifier hidden layers and a linear logit
//! head, trained from scratch with hand-written gradients.

mod backprop;
mod train;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::SeededRng;

pub(crate) use backprop::relative_error;
pub use backprop::{backward_gradients, finite_diff_check, mean_cross_entropy, Gradients};
pub use train::{cosine_lr, train_network, TrainConfig, TrainOutcome};

/// Probabilities below this are clamped inside the loss.
pub const PROB_FLOOR: f64 = 1e-12;

/// One affine map `y = W x + b`; `weights` is row-major `outputs x inputs`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub inputs: usize,
    pub outputs: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Layer {
    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Self {
            inputs,
            outputs,
            weights: vec![0.0; inputs * outputs],
            bias: vec![0.0; outputs],
        }
    }

    /// Gaussian weights with standard deviation `1/sqrt(inputs)`, zero bias.
    pub fn gaussian(inputs: usize, outputs: usize, rng: &mut SeededRng) -> Self {
        let normal = Normal::new(0.0, 1.0 / (inputs as f64).sqrt()).expect("positive std");
        Self {
            inputs,
            outputs,
            weights: (0..inputs * outputs).map(|_| normal.sample(rng)).collect(),
            bias: vec![0.0; outputs],
        }
    }

    pub fn weight(&self, row: usize, col: usize) -> f64 {
        self.weights[row * self.inputs + col]
    }

    /// Writes `W x + b` into `out`.
    pub fn apply(&self, x: &[f64], out: &mut Vec<f64>) {
        out.clear();
        out.extend(self.weights.chunks_exact(self.inputs).zip(&self.bias).map(|(row, b)| {
            row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>() + b
        }));
    }

    fn is_valid(&self) -> bool {
        self.inputs > 0
            && self.outputs > 0
            && self.weights.len() == self.inputs * self.outputs
            && self.bias.len() == self.outputs
            && self.weights.iter().chain(&self.bias).all(|v| v.is_finite())
    }
}

/// Layer stack: rectifier after every layer except the last (the head).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Layer>", into = "Vec<Layer>")]
pub struct NetworkParams {
    layers: Vec<Layer>,
}

impl TryFrom<Vec<Layer>> for NetworkParams {
    type Error = Error;

    fn try_from(layers: Vec<Layer>) -> Result<Self> {
        NetworkParams::new(layers)
    }
}

impl From<NetworkParams> for Vec<Layer> {
    fn from(params: NetworkParams) -> Self {
        params.layers
    }
}

impl NetworkParams {
    pub fn new(layers: Vec<Layer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::config("a network needs at least one layer"));
        }
        if let Some(i) = layers.iter().position(|l| !l.is_valid()) {
            return Err(Error::config(format!("layer {i} is malformed or non-finite")));
        }
        if let Some(i) = layers.windows(2).position(|w| w[0].outputs != w[1].inputs) {
            return Err(Error::config(format!(
                "layer {} outputs {} values but layer {} expects {}",
                i,
                layers[i].outputs,
                i + 1,
                layers[i + 1].inputs
            )));
        }
        Ok(Self { layers })
    }

    /// Gaussian-initialised network with the given `[input, hidden..., output]` widths.
    pub fn gaussian(dims: &[usize], rng: &mut SeededRng) -> Result<Self> {
        if dims.len() < 2 || dims.contains(&0) {
            return Err(Error::config(format!("invalid network dims {dims:?}")));
        }
        Self::new(
            dims.windows(2)
                .map(|w| Layer::gaussian(w[0], w[1], rng))
                .collect(),
        )
    }

    pub fn dims(&self) -> Vec<usize> {
        std::iter::once(self.layers[0].inputs)
            .chain(self.layers.iter().map(|l| l.outputs))
            .collect()
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].inputs
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].outputs
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub(crate) fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    /// Every layer except the head.
    pub fn backbone(&self) -> &[Layer] {
        &self.layers[..self.layers.len() - 1]
    }

    pub fn head(&self) -> &Layer {
        &self.layers[self.layers.len() - 1]
    }

    /// Same backbone with a replacement head.
    pub fn with_head(&self, head: Layer) -> Result<Self> {
        let mut layers = self.backbone().to_vec();
        layers.push(head);
        Self::new(layers)
    }

    pub fn all_finite(&self) -> bool {
        self.layers.iter().all(Layer::is_valid)
    }
}

/// Logits of one input.
pub fn forward_logits(params: &NetworkParams, x: &[f64]) -> Result<Vec<f64>> {
    if x.len() != params.input_dim() {
        return Err(Error::DimensionMismatch {
            row: 0,
            expected: params.input_dim(),
            found: x.len(),
        });
    }
    let mut current = x.to_vec();
    let mut next = Vec::new();
    let last = params.num_layers() - 1;
    for (i, layer) in params.layers().iter().enumerate() {
        layer.apply(&current, &mut next);
        if i < last {
            next.iter_mut().for_each(|v| *v = v.max(0.0));
        }
        std::mem::swap(&mut current, &mut next);
    }
    Ok(current)
}

/// Softmax with max-subtraction.
pub fn softmax(z: &[f64]) -> Vec<f64> {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = z.iter().map(|v| (v - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// `log softmax(z)`, stable for large logits.
pub fn log_softmax(z: &[f64]) -> Vec<f64> {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let log_total = z.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
    z.iter().map(|v| v - log_total).collect()
}

/// `-ln p[label]` with `p[label]` clamped below at [`PROB_FLOOR`].
pub fn cross_entropy_loss(probabilities: &[f64], label: usize) -> f64 {
    -probabilities[label].max(PROB_FLOOR).ln()
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}
