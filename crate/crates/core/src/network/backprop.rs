use super::{log_softmax, softmax, Layer, NetworkParams};
use crate::error::{Error, Result};

/// Mean-over-batch cross-entropy gradients for layers `frozen_layers..`.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    /// Index of the first layer that has an entry in `layers`.
    pub first_layer: usize,
    /// Gradients shaped like the corresponding layers.
    pub layers: Vec<Layer>,
    /// Mean cross-entropy of the batch (unclamped).
    pub loss: f64,
}

impl Gradients {
    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    /// Gradient of layer `index`, `None` for frozen layers.
    pub fn layer(&self, index: usize) -> Option<&Layer> {
        index
            .checked_sub(self.first_layer)
            .and_then(|i| self.layers.get(i))
    }
}

/// Forward pass keeping every layer's input (post-rectifier) activation.
fn forward_trace(params: &NetworkParams, x: &[f64]) -> (Vec<Vec<f64>>, Vec<f64>) {
    let last = params.num_layers() - 1;
    let mut inputs = Vec::with_capacity(params.num_layers());
    let mut current = x.to_vec();
    for (i, layer) in params.layers().iter().enumerate() {
        let mut out = Vec::with_capacity(layer.outputs);
        layer.apply(&current, &mut out);
        if i < last {
            out.iter_mut().for_each(|v| *v = v.max(0.0));
        }
        inputs.push(std::mem::replace(&mut current, out));
    }
    (inputs, current)
}

/// Exact gradients of the mean cross-entropy over `batch`.
///
/// Layers below `frozen_layers` get no entry; backpropagation stops at the
/// first unfrozen layer.
pub fn backward_gradients(
    params: &NetworkParams,
    batch: &[&[f64]],
    labels: &[usize],
    frozen_layers: usize,
) -> Result<Gradients> {
    if batch.is_empty() || batch.len() != labels.len() {
        return Err(Error::config(format!(
            "gradient batch needs matching non-empty inputs and labels ({} vs {})",
            batch.len(),
            labels.len()
        )));
    }
    let n_layers = params.num_layers();
    let first_layer = frozen_layers.min(n_layers);
    let mut grads: Vec<Layer> = params.layers()[first_layer..]
        .iter()
        .map(|l| Layer::zeros(l.inputs, l.outputs))
        .collect();
    let scale = 1.0 / batch.len() as f64;
    let mut loss = 0.0;

    for (&x, &label) in batch.iter().zip(labels) {
        if x.len() != params.input_dim() {
            return Err(Error::DimensionMismatch {
                row: 0,
                expected: params.input_dim(),
                found: x.len(),
            });
        }
        if label >= params.output_dim() {
            return Err(Error::LabelOutOfRange {
                row: 0,
                label,
                class_count: params.output_dim(),
            });
        }
        let (inputs, logits) = forward_trace(params, x);
        loss -= log_softmax(&logits)[label] * scale;
        if grads.is_empty() {
            continue;
        }
        // dL/dz = softmax - one_hot
        let mut delta = softmax(&logits);
        delta[label] -= 1.0;
        for l in (first_layer..n_layers).rev() {
            let layer = &params.layers()[l];
            let input = &inputs[l];
            let grad = &mut grads[l - first_layer];
            for (o, &d) in delta.iter().enumerate() {
                let g = d * scale;
                grad.bias[o] += g;
                let row = &mut grad.weights[o * layer.inputs..(o + 1) * layer.inputs];
                row.iter_mut().zip(input).for_each(|(w, a)| *w += g * a);
            }
            if l == first_layer {
                break;
            }
            // input[l] is relu(pre-activation of layer l-1)
            let mut below = vec![0.0; layer.inputs];
            for (o, &d) in delta.iter().enumerate() {
                let row = &layer.weights[o * layer.inputs..(o + 1) * layer.inputs];
                below.iter_mut().zip(row).for_each(|(b, w)| *b += w * d);
            }
            below
                .iter_mut()
                .zip(input)
                .for_each(|(b, &a)| if a <= 0.0 { *b = 0.0 });
            delta = below;
        }
    }
    Ok(Gradients {
        first_layer,
        layers: grads,
        loss,
    })
}

/// Mean unclamped cross-entropy of the batch.
pub fn mean_cross_entropy(params: &NetworkParams, batch: &[&[f64]], labels: &[usize]) -> f64 {
    batch
        .iter()
        .zip(labels)
        .map(|(&x, &label)| -log_softmax(&forward_trace(params, x).1)[label])
        .sum::<f64>()
        / batch.len() as f64
}

/// Relative error with magnitudes below `1e-4` treated as `1e-4`, so that
/// coordinates at round-off scale are compared absolutely.
pub(crate) fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-4)
}

/// Worst relative error between backpropagated gradients and central finite
/// differences over every parameter.
pub fn finite_diff_check(
    params: &NetworkParams,
    batch: &[&[f64]],
    labels: &[usize],
    eps: f64,
) -> Result<f64> {
    if !(eps.is_finite() && eps > 0.0) {
        return Err(Error::config(format!("finite-difference step must be positive, got {eps}")));
    }
    let analytic = backward_gradients(params, batch, labels, 0)?;
    let mut probe = params.clone();
    let mut worst = 0.0f64;
    for l in 0..params.num_layers() {
        let n_weights = params.layers()[l].weights.len();
        let n_bias = params.layers()[l].bias.len();
        for j in 0..n_weights + n_bias {
            let numeric = {
                let original = read_param(&probe, l, j, n_weights);
                write_param(&mut probe, l, j, n_weights, original + eps);
                let plus = mean_cross_entropy(&probe, batch, labels);
                write_param(&mut probe, l, j, n_weights, original - eps);
                let minus = mean_cross_entropy(&probe, batch, labels);
                write_param(&mut probe, l, j, n_weights, original);
                (plus - minus) / (2.0 * eps)
            };
            let grad = &analytic.layers[l];
            let exact = if j < n_weights {
                grad.weights[j]
            } else {
                grad.bias[j - n_weights]
            };
            worst = worst.max(relative_error(exact, numeric));
        }
    }
    Ok(worst)
}

fn read_param(params: &NetworkParams, layer: usize, j: usize, n_weights: usize) -> f64 {
    let l = &params.layers()[layer];
    if j < n_weights {
        l.weights[j]
    } else {
        l.bias[j - n_weights]
    }
}

fn write_param(params: &mut NetworkParams, layer: usize, j: usize, n_weights: usize, v: f64) {
    let l = &mut params.layers_mut()[layer];
    if j < n_weights {
        l.weights[j] = v;
    } else {
        l.bias[j - n_weights] = v;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;
    use rand::Rng;

    fn instance(seed: u64) -> (NetworkParams, Vec<Vec<f64>>, Vec<usize>) {
        let mut rng = seeded(seed);
        let net = NetworkParams::gaussian(&[4, 5, 3], &mut rng).unwrap();
        let xs: Vec<Vec<f64>> = (0..6)
            .map(|_| (0..4).map(|_| rng.random_range(-1.5..1.5)).collect())
            .collect();
        let labels = (0..6).map(|_| rng.random_range(0..3)).collect();
        (net, xs, labels)
    }

    #[test]
    fn head_gradient_is_softmax_minus_one_hot() {
        let (net, xs, labels) = instance(2);
        let batch: Vec<&[f64]> = xs.iter().map(Vec::as_slice).collect();
        let grads = backward_gradients(&net, &batch, &labels, 1).unwrap();
        assert_eq!(grads.first_layer, 1);
        assert!(grads.layer(0).is_none());
        let head = grads.layer(1).unwrap();

        // closed form: mean over samples of (p - e_y) h^T
        let mut expected = Layer::zeros(5, 3);
        for (x, &y) in xs.iter().zip(&labels) {
            let mut h = Vec::new();
            net.layers()[0].apply(x, &mut h);
            h.iter_mut().for_each(|v| *v = v.max(0.0));
            let mut z = Vec::new();
            net.layers()[1].apply(&h, &mut z);
            let mut d = softmax(&z);
            d[y] -= 1.0;
            for o in 0..3 {
                expected.bias[o] += d[o] / 6.0;
                for i in 0..5 {
                    expected.weights[o * 5 + i] += d[o] * h[i] / 6.0;
                }
            }
        }
        for (a, b) in head.weights.iter().zip(&expected.weights) {
            assert!((a - b).abs() < 1e-14);
        }
        for (a, b) in head.bias.iter().zip(&expected.bias) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn all_layers_frozen_gives_empty_structure() {
        let (net, xs, labels) = instance(3);
        let batch: Vec<&[f64]> = xs.iter().map(Vec::as_slice).collect();
        let grads = backward_gradients(&net, &batch, &labels, 2).unwrap();
        assert!(grads.is_empty());
        assert!(grads.loss > 0.0);
    }

    #[test]
    fn finite_differences_three_class_two_layer() {
        for seed in 0..20 {
            let (net, xs, labels) = instance(100 + seed);
            let batch: Vec<&[f64]> = xs.iter().map(Vec::as_slice).collect();
            let err = finite_diff_check(&net, &batch, &labels, 1e-4).unwrap();
            assert!(err < 1e-4, "seed {seed}: relative error {err}");
        }
    }

    #[test]
    fn zero_weight_network_is_exact() {
        let net = NetworkParams::new(vec![Layer::zeros(3, 4), Layer::zeros(4, 3)]).unwrap();
        let xs = [vec![1.0, -2.0, 0.5], vec![0.3, 0.3, -0.1]];
        let batch: Vec<&[f64]> = xs.iter().map(Vec::as_slice).collect();
        let err = finite_diff_check(&net, &batch, &[0, 2], 1e-4).unwrap();
        assert!(err < 1e-6, "relative error {err}");
    }

    #[test]
    fn zero_step_rejected() {
        let (net, xs, labels) = instance(4);
        let batch: Vec<&[f64]> = xs.iter().map(Vec::as_slice).collect();
        assert!(finite_diff_check(&net, &batch, &labels, 0.0).is_err());
        assert!(finite_diff_check(&net, &batch, &labels, f64::NAN).is_err());
    }

    #[test]
    fn empty_batch_rejected() {
        let (net, _, _) = instance(5);
        assert!(backward_gradients(&net, &[], &[], 0).is_err());
    }
}
