use serde::{Deserialize, Serialize};

use super::{backward_gradients, NetworkParams};
use crate::dataset::{BatchSampler, EmbeddingDataset, SamplerMode};
use crate::error::{Error, Result};
use crate::rng;

/// SGD hyperparameters.
///
/// Momentum and weight decay defaults (0.9, 1e-4) are conventional choices,
/// not tuned values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr0: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Leading layers excluded from updates.
    #[serde(default)]
    pub frozen_layers: usize,
    #[serde(default = "default_sampler")]
    pub sampler: SamplerMode,
    pub seed: u64,
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f64,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
}

fn default_sampler() -> SamplerMode {
    SamplerMode::InstanceBalanced
}

fn default_weight_decay() -> f64 {
    1e-4
}

fn default_momentum() -> f64 {
    0.9
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr0: 0.1,
            epochs: 100,
            batch_size: 32,
            frozen_layers: 0,
            sampler: default_sampler(),
            seed: 0,
            weight_decay: default_weight_decay(),
            momentum: default_momentum(),
        }
    }
}

impl TrainConfig {
    /// `frozen_layers` may equal the layer count, which makes training a no-op.
    pub fn validate(&self, num_layers: usize) -> Result<()> {
        if !(self.lr0.is_finite() && self.lr0 > 0.0) {
            return Err(Error::config(format!("lr0 must be positive, got {}", self.lr0)));
        }
        if self.epochs == 0 {
            return Err(Error::config("epochs must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be at least 1"));
        }
        if self.frozen_layers > num_layers {
            return Err(Error::config(format!(
                "cannot freeze {} of {} layers",
                self.frozen_layers, num_layers
            )));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(Error::config("weight_decay must be non-negative"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config("momentum must lie in [0, 1)"));
        }
        self.sampler.validate()
    }
}

/// `0.5 * lr0 * (1 + cos(pi * t / T))`.
pub fn cosine_lr(lr0: f64, t: usize, total: usize) -> f64 {
    debug_assert!(total >= 1 && t <= total);
    0.5 * lr0 * (1.0 + (std::f64::consts::PI * t as f64 / total as f64).cos())
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: NetworkParams,
    /// Mean clamped batch loss of every epoch.
    pub loss_trace: Vec<f64>,
}

/// Mini-batch SGD with momentum, per-epoch cosine learning rate and L2
/// weight decay on the weight matrices of unfrozen layers.
pub fn train_network(
    params: &NetworkParams,
    dataset: &EmbeddingDataset,
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    config.validate(params.num_layers())?;
    if dataset.class_count() != params.output_dim() {
        return Err(Error::config(format!(
            "network head has {} outputs but the dataset has {} classes",
            params.output_dim(),
            dataset.class_count()
        )));
    }
    if dataset.dim() != params.input_dim() {
        return Err(Error::config(format!(
            "network expects inputs of dimension {}, dataset has {}",
            params.input_dim(),
            dataset.dim()
        )));
    }
    let mut params = params.clone();
    if config.frozen_layers == params.num_layers() {
        return Ok(TrainOutcome {
            params,
            loss_trace: Vec::new(),
        });
    }

    let sampler = BatchSampler::new(dataset, config.sampler)?;
    let steps_per_epoch = (sampler.effective_len() / config.batch_size as f64)
        .ceil()
        .max(1.0) as usize;
    let mut rng = rng::seeded(config.seed);
    let first = config.frozen_layers;
    let mut velocity: Vec<_> = params.layers()[first..]
        .iter()
        .map(|l| (vec![0.0; l.weights.len()], vec![0.0; l.bias.len()]))
        .collect();
    let mut loss_trace = Vec::with_capacity(config.epochs);

    for epoch in 0..config.epochs {
        let lr = cosine_lr(config.lr0, epoch, config.epochs);
        let mut epoch_loss = 0.0;
        for _ in 0..steps_per_epoch {
            let indices = sampler.draw(config.batch_size, &mut rng)?;
            let batch: Vec<&[f64]> = indices.iter().map(|&i| dataset.feature(i)).collect();
            let labels: Vec<usize> = indices.iter().map(|&i| dataset.label(i)).collect();
            let grads = backward_gradients(&params, &batch, &labels, first)?;
            epoch_loss += grads.loss.min(-super::PROB_FLOOR.ln());
            for ((layer, grad), (vw, vb)) in params.layers_mut()[first..]
                .iter_mut()
                .zip(&grads.layers)
                .zip(velocity.iter_mut())
            {
                for ((w, g), v) in layer.weights.iter_mut().zip(&grad.weights).zip(vw.iter_mut()) {
                    *v = config.momentum * *v + g + config.weight_decay * *w;
                    *w -= lr * *v;
                }
                for ((b, g), v) in layer.bias.iter_mut().zip(&grad.bias).zip(vb.iter_mut()) {
                    *v = config.momentum * *v + g;
                    *b -= lr * *v;
                }
            }
        }
        let mean = epoch_loss / steps_per_epoch as f64;
        if !mean.is_finite() || !params.all_finite() {
            return Err(Error::Divergence { epoch, loss: mean });
        }
        loss_trace.push(mean);
    }
    Ok(TrainOutcome { params, loss_trace })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{argmax, forward_logits};
    use crate::rng::seeded;
    use rand_distr::{Distribution, StandardNormal};

    fn two_blobs(seed: u64) -> EmbeddingDataset {
        let mut rng = seeded(seed);
        let mut features = Vec::new();
        let mut labels = Vec::new();
        for (label, centre) in [(0usize, -2.0), (1, 2.0)] {
            for _ in 0..100 {
                let n: f64 = StandardNormal.sample(&mut rng);
                let m: f64 = StandardNormal.sample(&mut rng);
                features.extend([centre + 0.3 * n, 0.3 * m]);
                labels.push(label);
            }
        }
        EmbeddingDataset::new(2, 2, features, labels).unwrap()
    }

    fn accuracy(params: &NetworkParams, data: &EmbeddingDataset) -> f64 {
        data.iter()
            .filter(|(x, y)| argmax(&forward_logits(params, x).unwrap()) == *y)
            .count() as f64
            / data.len() as f64
    }

    fn config() -> TrainConfig {
        TrainConfig {
            lr0: 0.1,
            epochs: 20,
            batch_size: 16,
            seed: 3,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn cosine_endpoints() {
        assert_eq!(cosine_lr(0.2, 0, 10), 0.2);
        assert!(cosine_lr(0.2, 10, 10).abs() < 1e-17);
        assert!((cosine_lr(0.2, 5, 10) - 0.1).abs() < 1e-15);
    }

    #[test]
    fn separable_blobs_are_learned() {
        let data = two_blobs(1);
        let init = NetworkParams::gaussian(&[2, 8, 2], &mut seeded(0)).unwrap();
        let out = train_network(&init, &data, &config()).unwrap();
        assert!(accuracy(&out.params, &data) >= 0.99);
        assert_eq!(out.loss_trace.len(), 20);
        assert!(out.loss_trace.last() < out.loss_trace.first());
    }

    #[test]
    fn fully_frozen_network_is_unchanged() {
        let data = two_blobs(2);
        let init = NetworkParams::gaussian(&[2, 8, 2], &mut seeded(0)).unwrap();
        let cfg = TrainConfig {
            frozen_layers: 2,
            ..config()
        };
        assert_eq!(train_network(&init, &data, &cfg).unwrap().params, init);
    }

    #[test]
    fn frozen_prefix_is_bit_identical() {
        let data = two_blobs(2);
        let init = NetworkParams::gaussian(&[2, 8, 2], &mut seeded(0)).unwrap();
        let cfg = TrainConfig {
            frozen_layers: 1,
            ..config()
        };
        let out = train_network(&init, &data, &cfg).unwrap().params;
        assert_eq!(out.layers()[0], init.layers()[0]);
        assert_ne!(out.layers()[1], init.layers()[1]);
    }

    #[test]
    fn deterministic_given_seed() {
        let data = two_blobs(4);
        let init = NetworkParams::gaussian(&[2, 8, 2], &mut seeded(0)).unwrap();
        let a = train_network(&init, &data, &config()).unwrap();
        let b = train_network(&init, &data, &config()).unwrap();
        assert_eq!(a.params, b.params);
        assert_eq!(a.loss_trace, b.loss_trace);
    }

    #[test]
    fn divergence_is_reported_with_epoch() {
        let data = two_blobs(5);
        let init = NetworkParams::gaussian(&[2, 8, 2], &mut seeded(0)).unwrap();
        let cfg = TrainConfig {
            lr0: 1e300,
            ..config()
        };
        assert!(matches!(
            train_network(&init, &data, &cfg),
            Err(Error::Divergence { epoch: 0, .. })
        ));
    }

    #[test]
    fn head_width_must_match_classes() {
        let data = two_blobs(6);
        let init = NetworkParams::gaussian(&[2, 8, 3], &mut seeded(0)).unwrap();
        assert!(train_network(&init, &data, &config()).is_err());
    }

    #[test]
    fn invalid_configs_rejected() {
        for cfg in [
            TrainConfig { lr0: 0.0, ..config() },
            TrainConfig { epochs: 0, ..config() },
            TrainConfig { frozen_layers: 3, ..config() },
            TrainConfig { momentum: 1.0, ..config() },
        ] {
            assert!(cfg.validate(2).is_err(), "{cfg:?}");
        }
    }
}
