//! Linear softmax fusers trained on concatenated validation posteriors.

use serde::{Deserialize, Serialize};

use super::{expand_partial, EnsembleOutputs, FullPosterior, PosteriorLayout};
use crate::dataset::{EmbeddingDataset, SamplerMode};
use crate::error::{Error, Result};
use crate::network::{argmax, forward_logits, softmax, train_network, Layer, NetworkParams, TrainConfig};

/// SGD settings for the selector and the stacker.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FitOptions {
    pub lr0: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub weight_decay: f64,
    pub momentum: f64,
    pub seed: u64,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            lr0: 0.5,
            epochs: 60,
            batch_size: 32,
            weight_decay: 1e-4,
            momentum: 0.9,
            seed: 0,
        }
    }
}

/// One-layer softmax classifier over a fixed-width feature vector,
/// zero-initialised and fitted with the network trainer.
fn fit_linear(
    features: Vec<f64>,
    width: usize,
    labels: Vec<usize>,
    classes: usize,
    options: &FitOptions,
) -> Result<NetworkParams> {
    let data = EmbeddingDataset::new(width, classes, features, labels)?;
    let init = NetworkParams::new(vec![Layer::zeros(width, classes)])?;
    let config = TrainConfig {
        lr0: options.lr0,
        epochs: options.epochs,
        batch_size: options.batch_size,
        frozen_layers: 0,
        sampler: SamplerMode::InstanceBalanced,
        seed: options.seed,
        weight_decay: options.weight_decay,
        momentum: options.momentum,
    };
    Ok(train_network(&init, &data, &config)?.params)
}

fn concatenated_features(outputs: &EnsembleOutputs) -> Vec<f64> {
    (0..outputs.len()).flat_map(|i| outputs.concatenated(i)).collect()
}

/// Predicts which member owns a sample's class from the concatenated
/// partial posteriors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectorModel {
    net: NetworkParams,
}

impl SelectorModel {
    pub fn from_params(net: NetworkParams) -> Result<Self> {
        if net.num_layers() != 1 {
            return Err(Error::config("a selector is a single linear layer"));
        }
        Ok(Self { net })
    }

    pub fn input_width(&self) -> usize {
        self.net.input_dim()
    }

    pub fn choices(&self) -> usize {
        self.net.output_dim()
    }

    pub fn probabilities(&self, concatenated: &[f64]) -> Result<Vec<f64>> {
        Ok(softmax(&forward_logits(&self.net, concatenated)?))
    }
}

/// Fits the member selector. `owners[i]` is the index of the member whose
/// subset holds sample `i`'s true class; every member must own a sample.
pub fn train_expert_selector(
    val: &EnsembleOutputs,
    owners: &[usize],
    options: &FitOptions,
) -> Result<SelectorModel> {
    let members = val.members().len();
    if owners.len() != val.len() {
        return Err(Error::config("one owner label per validation sample is required"));
    }
    let mut seen = vec![false; members];
    for &o in owners {
        *seen.get_mut(o).ok_or_else(|| Error::config(format!("owner {o} out of range")))? = true;
    }
    if let Some(m) = seen.iter().position(|s| !s) {
        return Err(Error::MissingExpert(val.members()[m].name.clone()));
    }
    let net = fit_linear(
        concatenated_features(val),
        val.feature_width(),
        owners.to_vec(),
        members,
        options,
    )?;
    SelectorModel::from_params(net)
}

/// g applied to the member the selector picks; exact ties go to the
/// earliest member.
pub fn fuse_by_selection(
    partials: &[&[f64]],
    selector: &SelectorModel,
    layouts: &[PosteriorLayout],
) -> Result<FullPosterior> {
    super::check_members(partials.len(), layouts)?;
    if selector.choices() != partials.len() {
        return Err(Error::config(format!(
            "selector chooses among {} members, ensemble has {}",
            selector.choices(),
            partials.len()
        )));
    }
    let features: Vec<f64> = partials.iter().flat_map(|p| p.iter().copied()).collect();
    let chosen = argmax(&selector.probabilities(&features)?);
    FullPosterior::normalized(expand_partial(partials[chosen], &layouts[chosen])?.posterior)
}

/// Linear softmax map from concatenated partial posteriors to all classes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StackerModel {
    net: NetworkParams,
}

impl StackerModel {
    pub fn from_params(net: NetworkParams) -> Result<Self> {
        if net.num_layers() != 1 {
            return Err(Error::config("a stacker is a single linear layer"));
        }
        Ok(Self { net })
    }

    pub fn input_width(&self) -> usize {
        self.net.input_dim()
    }

    pub fn class_count(&self) -> usize {
        self.net.output_dim()
    }
}

pub fn train_stacker(
    val: &EnsembleOutputs,
    labels: &[usize],
    options: &FitOptions,
) -> Result<StackerModel> {
    if labels.len() != val.len() {
        return Err(Error::config("one class label per validation sample is required"));
    }
    let net = fit_linear(
        concatenated_features(val),
        val.feature_width(),
        labels.to_vec(),
        val.class_count(),
        options,
    )?;
    StackerModel::from_params(net)
}

pub fn fuse_by_stacking(concatenated: &[f64], stacker: &StackerModel) -> Result<FullPosterior> {
    FullPosterior::normalized(softmax(&forward_logits(&stacker.net, concatenated)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fusion::MemberOutputs;
    use crate::network::softmax;

    /// Three one-class experts over C=3; on sample i the owning expert is
    /// confident in its class, the others mostly reject.
    fn confident_ensemble(n: usize, signal: bool) -> (EnsembleOutputs, Vec<usize>) {
        let labels: Vec<usize> = (0..n).map(|i| (i * 7 + i / 3) % 3).collect();
        let members = (0..3)
            .map(|e| {
                let layout = PosteriorLayout::new(3, vec![e], true).unwrap();
                let logits: Vec<Vec<f64>> = labels
                    .iter()
                    .enumerate()
                    .map(|(i, &y)| {
                        let jitter = ((i * 13 + e * 5) % 7) as f64 * 0.1;
                        if !signal {
                            vec![0.0, 0.0]
                        } else if y == e {
                            vec![3.0 + jitter, 0.0]
                        } else {
                            vec![0.0, 2.0 + jitter]
                        }
                    })
                    .collect();
                let probabilities = logits.iter().map(|z| softmax(z)).collect();
                MemberOutputs {
                    name: format!("e{e}"),
                    layout,
                    logits,
                    probabilities,
                }
            })
            .collect();
        (EnsembleOutputs::new(members).unwrap(), labels)
    }

    #[test]
    fn selector_learns_separable_ownership() {
        let (outputs, labels) = confident_ensemble(200, true);
        let train: Vec<usize> = (0..100).collect();
        let held: Vec<usize> = (100..200).collect();
        let subset = |idx: &[usize]| {
            EnsembleOutputs::new(
                outputs
                    .members()
                    .iter()
                    .map(|m| MemberOutputs {
                        name: m.name.clone(),
                        layout: m.layout.clone(),
                        logits: idx.iter().map(|&i| m.logits[i].clone()).collect(),
                        probabilities: idx.iter().map(|&i| m.probabilities[i].clone()).collect(),
                    })
                    .collect(),
            )
            .unwrap()
        };
        let train_labels: Vec<usize> = train.iter().map(|&i| labels[i]).collect();
        let selector =
            train_expert_selector(&subset(&train), &train_labels, &FitOptions::default()).unwrap();
        assert_eq!(selector.input_width(), 6);
        let held_out = subset(&held);
        let correct = held
            .iter()
            .enumerate()
            .filter(|&(j, &i)| {
                argmax(&selector.probabilities(&held_out.concatenated(j)).unwrap()) == labels[i]
            })
            .count();
        assert!(correct as f64 / held.len() as f64 >= 0.95);
    }

    #[test]
    fn selector_without_signal_predicts_majority() {
        let (outputs, _) = confident_ensemble(90, false);
        // owners skewed 60/20/10
        let owners: Vec<usize> = (0..90).map(|i| if i < 60 { 1 } else if i < 80 { 0 } else { 2 }).collect();
        let selector = train_expert_selector(&outputs, &owners, &FitOptions::default()).unwrap();
        let acc = (0..90)
            .filter(|&i| argmax(&selector.probabilities(&outputs.concatenated(i)).unwrap()) == owners[i])
            .count() as f64
            / 90.0;
        assert!((acc - 60.0 / 90.0).abs() < 1e-12);
    }

    #[test]
    fn selector_requires_every_member() {
        let (outputs, _) = confident_ensemble(30, true);
        let owners = vec![0; 30];
        assert!(matches!(
            train_expert_selector(&outputs, &owners, &FitOptions::default()),
            Err(Error::MissingExpert(name)) if name == "e1"
        ));
    }

    #[test]
    fn selection_tie_prefers_first_member() {
        let layouts = [
            PosteriorLayout::new(2, vec![0], true).unwrap(),
            PosteriorLayout::new(2, vec![1], true).unwrap(),
        ];
        let selector =
            SelectorModel::from_params(NetworkParams::new(vec![Layer::zeros(4, 2)]).unwrap()).unwrap();
        let a = [0.9, 0.1];
        let b = [0.8, 0.2];
        let q = fuse_by_selection(&[&a, &b], &selector, &layouts).unwrap();
        assert_eq!(q.probabilities(), &[0.9, 0.1]);
    }

    #[test]
    fn selection_follows_confident_selector() {
        let layouts = [
            PosteriorLayout::new(3, vec![0], true).unwrap(),
            PosteriorLayout::new(3, vec![1, 2], true).unwrap(),
        ];
        let mut head = Layer::zeros(5, 2);
        head.bias = vec![-20.0, 20.0];
        let selector = SelectorModel::from_params(NetworkParams::new(vec![head]).unwrap()).unwrap();
        let a = [0.9, 0.1];
        let b = [0.2, 0.2, 0.6];
        let q = fuse_by_selection(&[&a, &b], &selector, &layouts).unwrap();
        let g = expand_partial(&b, &layouts[1]).unwrap();
        assert_eq!(q.probabilities(), g.posterior.as_slice());
    }

    #[test]
    fn untrained_stacker_is_uniform() {
        let stacker =
            StackerModel::from_params(NetworkParams::new(vec![Layer::zeros(6, 4)]).unwrap()).unwrap();
        let q = fuse_by_stacking(&[0.1, 0.9, 0.3, 0.3, 0.2, 0.2], &stacker).unwrap();
        assert!(q.probabilities().iter().all(|p| (p - 0.25).abs() < 1e-15));
    }

    #[test]
    fn stacker_shapes() {
        let (outputs, labels) = confident_ensemble(60, true);
        let stacker = train_stacker(&outputs, &labels, &FitOptions::default()).unwrap();
        assert_eq!(stacker.input_width(), outputs.feature_width());
        assert_eq!(stacker.class_count(), 3);
        let q = fuse_by_stacking(&outputs.concatenated(0), &stacker).unwrap();
        assert_eq!(q.len(), 3);
        assert_eq!(q.argmax(), labels[0]);
    }
}
