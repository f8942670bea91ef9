//! Baseline, uniform-sampling finetune and class-balanced experts with a
//! reject class.
//!
//! An expert copies the baseline backbone, gets a fresh `(k+1)`-way head and
//! is trained on its subset with every other sample relabelled as reject.
//! Reject samples are undersampled by `rho` during training; at inference the
//! reject logit is raised by `ln(rho)` to restore the true prior.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{relabel_for_expert, DatasetBundle, EmbeddingDataset, Fold, SamplerMode, SubsetSpec};
use crate::error::{Error, Result};
use crate::fsutil::write_atomic;
use crate::fusion::{MemberOutputs, PosteriorLayout};
use crate::network::{argmax, forward_logits, softmax, train_network, Layer, NetworkParams, TrainConfig};
use crate::rng::{derive_seed, seeded};

const CHECKPOINT_FORMAT: &str = "cbexperts.model";
const CHECKPOINT_VERSION: u32 = 1;

const INIT_STREAM: u64 = 0x1A17;
const HEAD_STREAM: u64 = 0x4EAD;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineModel {
    pub params: NetworkParams,
}

impl BaselineModel {
    pub fn class_count(&self) -> usize {
        self.params.output_dim()
    }

    pub fn logits(&self, x: &[f64]) -> Result<Vec<f64>> {
        forward_logits(&self.params, x)
    }

    pub fn predict(&self, x: &[f64]) -> Result<usize> {
        Ok(argmax(&self.logits(x)?))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpertModel {
    pub params: NetworkParams,
    pub subset: SubsetSpec,
    pub rho: f64,
    pub frozen_layers: usize,
    pub apply_reject_correction: bool,
}

impl ExpertModel {
    pub fn new(
        params: NetworkParams,
        subset: SubsetSpec,
        rho: f64,
        frozen_layers: usize,
        apply_reject_correction: bool,
    ) -> Result<Self> {
        if params.output_dim() != subset.head_width() {
            return Err(Error::config(format!(
                "{} expert head has width {}, subset needs {}",
                subset.expert(),
                params.output_dim(),
                subset.head_width()
            )));
        }
        if !(rho.is_finite() && rho >= 1.0) {
            return Err(Error::config(format!("rho must be >= 1, got {rho}")));
        }
        if frozen_layers >= params.num_layers() {
            return Err(Error::config("an expert must train at least its head"));
        }
        Ok(Self {
            params,
            subset,
            rho,
            frozen_layers,
            apply_reject_correction,
        })
    }

    pub fn expert(&self) -> Fold {
        self.subset.expert()
    }

    pub fn layout(&self) -> PosteriorLayout {
        PosteriorLayout::from_subset(&self.subset)
    }
}

/// Output of one expert on one input; `logits` already carry the reject
/// correction when the expert applies it.
#[derive(Debug, Clone, PartialEq)]
pub struct PartialPosterior {
    pub expert: Fold,
    pub logits: Vec<f64>,
    pub probabilities: Vec<f64>,
}

fn check_sampler(config: &TrainConfig, expected: &str, ok: bool) -> Result<()> {
    if ok {
        Ok(())
    } else {
        Err(Error::config(format!(
            "{expected} training requires a different sampler than {:?}",
            config.sampler
        )))
    }
}

/// Trains a fresh network with the given hidden widths on the full
/// long-tailed training split.
pub fn train_baseline(
    bundle: &DatasetBundle,
    hidden: &[usize],
    config: &TrainConfig,
) -> Result<(BaselineModel, Vec<f64>)> {
    check_sampler(config, "baseline", config.sampler == SamplerMode::InstanceBalanced)?;
    let mut dims = vec![bundle.dim()];
    dims.extend_from_slice(hidden);
    dims.push(bundle.class_count());
    let init = NetworkParams::gaussian(&dims, &mut seeded(derive_seed(config.seed, INIT_STREAM)))?;
    let outcome = train_network(&init, &bundle.train, config)?;
    Ok((BaselineModel { params: outcome.params }, outcome.loss_trace))
}

/// Retrains only the baseline head with uniform class sampling. The sampler
/// and frozen-layer count in `config` are overridden.
pub fn finetune_uniform_classifier(
    baseline: &BaselineModel,
    bundle: &DatasetBundle,
    config: &TrainConfig,
) -> Result<(BaselineModel, Vec<f64>)> {
    let config = TrainConfig {
        sampler: SamplerMode::UniformClass,
        frozen_layers: baseline.params.num_layers() - 1,
        ..config.clone()
    };
    let outcome = train_network(&baseline.params, &bundle.train, &config)?;
    Ok((BaselineModel { params: outcome.params }, outcome.loss_trace))
}

/// Trains one expert from the baseline backbone. The sampler and frozen
/// count in `config` are replaced by `rho` and `frozen_layers`.
pub fn train_expert(
    baseline: &BaselineModel,
    subset: &SubsetSpec,
    bundle: &DatasetBundle,
    rho: f64,
    frozen_layers: usize,
    config: &TrainConfig,
) -> Result<(ExpertModel, Vec<f64>)> {
    if subset.is_empty() {
        return Err(Error::EmptyFold(subset.expert()));
    }
    let num_layers = baseline.params.num_layers();
    if frozen_layers >= num_layers {
        return Err(Error::config(format!(
            "frozen_layers {frozen_layers} leaves nothing to train in a {num_layers}-layer network"
        )));
    }
    let sampler = SamplerMode::RejectUndersampled { rho };
    sampler.validate()?;
    let head_seed = derive_seed(config.seed, HEAD_STREAM + subset.expert().index() as u64);
    let head_inputs = baseline.params.head().inputs;
    let head = Layer::gaussian(head_inputs, subset.head_width(), &mut seeded(head_seed));
    let init = baseline.params.with_head(head)?;
    let data = relabel_for_expert(&bundle.train, subset)?;
    let config = TrainConfig {
        sampler,
        frozen_layers,
        ..config.clone()
    };
    let outcome = train_network(&init, &data, &config)?;
    let expert = ExpertModel::new(outcome.params, subset.clone(), rho, frozen_layers, true)?;
    Ok((expert, outcome.loss_trace))
}

/// Expert output on `x` with the reject logit raised by `ln(rho)` when the
/// expert applies the correction.
pub fn expert_partial_posterior(expert: &ExpertModel, x: &[f64]) -> Result<PartialPosterior> {
    let mut logits = forward_logits(&expert.params, x)?;
    if expert.apply_reject_correction {
        logits[expert.subset.reject_index()] += expert.rho.ln();
    }
    let probabilities = softmax(&logits);
    Ok(PartialPosterior {
        expert: expert.expert(),
        logits,
        probabilities,
    })
}

/// Accuracy of an expert on the validation samples of its own classes,
/// predicting by the argmax over its `k` subset outputs.
pub fn expert_subset_accuracy(expert: &ExpertModel, data: &EmbeddingDataset) -> Result<f64> {
    let samples: Vec<(usize, &[f64])> = data
        .iter()
        .filter_map(|(x, y)| expert.subset.local(y).map(|l| (l, x)))
        .collect();
    if samples.is_empty() {
        return Err(Error::EmptyFold(expert.expert()));
    }
    let correct = samples
        .par_iter()
        .map(|&(local, x)| {
            let p = expert_partial_posterior(expert, x)?.probabilities;
            Ok(usize::from(argmax(&p[..expert.subset.len()]) == local))
        })
        .collect::<Result<Vec<usize>>>()?
        .into_iter()
        .sum::<usize>();
    Ok(correct as f64 / samples.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HyperGrid {
    pub rho_grid: Vec<f64>,
    pub frozen_grid: Vec<usize>,
}

impl HyperGrid {
    pub fn validate(&self) -> Result<()> {
        if self.rho_grid.is_empty() || self.frozen_grid.is_empty() {
            return Err(Error::config("rho_grid and frozen_grid must be nonempty"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridScore {
    pub rho: f64,
    pub frozen_layers: usize,
    pub val_accuracy: f64,
}

#[derive(Debug, Clone)]
pub struct ExpertSelection {
    pub expert: ExpertModel,
    pub loss_trace: Vec<f64>,
    pub rho: f64,
    pub frozen_layers: usize,
    /// One row per grid point, rho-major.
    pub table: Vec<GridScore>,
}

/// Trains one expert per grid point (in parallel) and keeps the one with
/// the best in-subset validation accuracy. Ties go to the larger `rho`,
/// then to more frozen layers.
pub fn select_expert_hyperparams(
    baseline: &BaselineModel,
    subset: &SubsetSpec,
    bundle: &DatasetBundle,
    grid: &HyperGrid,
    config: &TrainConfig,
) -> Result<ExpertSelection> {
    grid.validate()?;
    let points: Vec<(f64, usize)> = grid
        .rho_grid
        .iter()
        .flat_map(|&rho| grid.frozen_grid.iter().map(move |&f| (rho, f)))
        .collect();
    let trained = points
        .par_iter()
        .map(|&(rho, frozen)| {
            let (expert, trace) = train_expert(baseline, subset, bundle, rho, frozen, config)?;
            let score = expert_subset_accuracy(&expert, &bundle.val)?;
            Ok((expert, trace, score))
        })
        .collect::<Result<Vec<_>>>()?;
    let table: Vec<GridScore> = points
        .iter()
        .zip(&trained)
        .map(|(&(rho, frozen_layers), (_, _, score))| GridScore {
            rho,
            frozen_layers,
            val_accuracy: *score,
        })
        .collect();
    let best = (0..table.len())
        .max_by(|&a, &b| {
            let (x, y) = (&table[a], &table[b]);
            x.val_accuracy
                .total_cmp(&y.val_accuracy)
                .then(x.rho.total_cmp(&y.rho))
                .then(x.frozen_layers.cmp(&y.frozen_layers))
                .then(b.cmp(&a))
        })
        .expect("grid is nonempty");
    let (rho, frozen_layers) = points[best];
    let (expert, loss_trace, _) = trained.into_iter().nth(best).expect("index in range");
    Ok(ExpertSelection {
        expert,
        loss_trace,
        rho,
        frozen_layers,
        table,
    })
}

/// Corrected logits and posteriors of an expert over every sample of `data`.
pub fn expert_outputs(expert: &ExpertModel, data: &EmbeddingDataset) -> Result<MemberOutputs> {
    let rows = (0..data.len())
        .into_par_iter()
        .map(|i| expert_partial_posterior(expert, data.feature(i)))
        .collect::<Result<Vec<_>>>()?;
    let (logits, probabilities) = rows.into_iter().map(|p| (p.logits, p.probabilities)).unzip();
    Ok(MemberOutputs {
        name: expert.expert().as_str().to_string(),
        layout: expert.layout(),
        logits,
        probabilities,
    })
}

/// Full-width outputs of a baseline-style model over every sample of `data`.
pub fn baseline_outputs(name: &str, model: &BaselineModel, data: &EmbeddingDataset) -> Result<MemberOutputs> {
    let logits = (0..data.len())
        .into_par_iter()
        .map(|i| model.logits(data.feature(i)))
        .collect::<Result<Vec<_>>>()?;
    let probabilities = logits.iter().map(|z: &Vec<f64>| softmax(z)).collect();
    Ok(MemberOutputs {
        name: name.to_string(),
        layout: PosteriorLayout::full(model.class_count()),
        logits,
        probabilities,
    })
}

/// A saved model of either kind.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Checkpoint {
    Baseline(BaselineModel),
    Expert(ExpertModel),
}

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    format: String,
    version: u32,
    name: String,
    model: Checkpoint,
}

pub fn save_checkpoint(path: &Path, name: &str, model: &Checkpoint) -> Result<()> {
    let file = CheckpointFile {
        format: CHECKPOINT_FORMAT.into(),
        version: CHECKPOINT_VERSION,
        name: name.into(),
        model: model.clone(),
    };
    let mut text = serde_json::to_string(&file)?;
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

/// Returns the stored model name and model.
pub fn load_checkpoint(path: &Path) -> Result<(String, Checkpoint)> {
    let file: CheckpointFile = serde_json::from_str(&std::fs::read_to_string(path)?)?;
    if file.format != CHECKPOINT_FORMAT || file.version != CHECKPOINT_VERSION {
        return Err(Error::config(format!(
            "{}: unsupported checkpoint {} v{}",
            path.display(),
            file.format,
            file.version
        )));
    }
    if let Checkpoint::Expert(e) = &file.model {
        ExpertModel::new(e.params.clone(), e.subset.clone(), e.rho, e.frozen_layers, e.apply_reject_correction)?;
    }
    Ok((file.name, file.model))
}
