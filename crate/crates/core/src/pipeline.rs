//! End-to-end benchmark run: baseline, uniform finetune, three experts and
//! the fused evaluations, all derived from one seed.

use serde::{Deserialize, Serialize};

use crate::dataset::{assign_folds, partition_subsets, DatasetBundle, FoldAssignment, FoldThresholds, SubsetSpec};
use crate::error::Result;
use crate::evaluation::{argmax_predictions, fourfold_accuracy, oracle_from_outputs, EvalReport};
use crate::experts::{
    baseline_outputs, expert_outputs, finetune_uniform_classifier, select_expert_hyperparams, train_baseline,
    BaselineModel, ExpertSelection, HyperGrid,
};
use crate::fusion::{EnsembleOutputs, FullPosterior, FusionModel, FusionOptions, FusionStrategy, MemberOutputs};
use crate::network::TrainConfig;
use crate::rng::derive_seed;

/// Seed stream labels for the independent stages. Synthetic data is
/// generated from the run seed itself.
pub const BASELINE_STREAM: u64 = 1;
pub const UNIFORM_STREAM: u64 = 2;
pub const EXPERT_STREAM: u64 = 3;
pub const FUSION_STREAM: u64 = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub hidden: Vec<usize>,
    pub thresholds: FoldThresholds,
    pub baseline: TrainConfig,
    pub uniform: TrainConfig,
    pub expert: TrainConfig,
    pub grid: HyperGrid,
    pub fusion: FusionOptions,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            hidden: vec![64],
            thresholds: FoldThresholds::default(),
            baseline: TrainConfig {
                lr0: 0.05,
                epochs: 100,
                batch_size: 32,
                ..TrainConfig::default()
            },
            uniform: TrainConfig {
                lr0: 0.02,
                epochs: 30,
                batch_size: 32,
                ..TrainConfig::default()
            },
            expert: TrainConfig {
                lr0: 0.02,
                epochs: 30,
                batch_size: 32,
                ..TrainConfig::default()
            },
            grid: HyperGrid {
                rho_grid: vec![1.0, 2.0, 5.0, 10.0],
                frozen_grid: vec![0, 1],
            },
            fusion: FusionOptions::default(),
        }
    }
}

impl PipelineConfig {
    /// Copy with every stage seed derived from `seed`.
    pub fn seeded(&self, seed: u64) -> Self {
        let mut out = self.clone();
        out.baseline.seed = derive_seed(seed, BASELINE_STREAM);
        out.uniform.seed = derive_seed(seed, UNIFORM_STREAM);
        out.expert.seed = derive_seed(seed, EXPERT_STREAM);
        let fusion_seed = derive_seed(seed, FUSION_STREAM);
        out.fusion.selector.seed = fusion_seed;
        out.fusion.stacker.seed = fusion_seed;
        out
    }
}

/// Split layout of a bundle: fold per class and the three expert subsets.
#[derive(Debug, Clone)]
pub struct Partition {
    pub folds: FoldAssignment,
    pub subsets: [SubsetSpec; 3],
}

pub fn partition(bundle: &DatasetBundle, thresholds: FoldThresholds) -> Result<Partition> {
    let folds = assign_folds(&bundle.train, thresholds)?;
    let subsets = partition_subsets(&folds, &bundle.train)?;
    Ok(Partition { folds, subsets })
}

/// Everything trained in one run.
#[derive(Debug, Clone)]
pub struct BenchmarkRun {
    pub partition: Partition,
    pub baseline: BaselineModel,
    pub uniform: BaselineModel,
    pub experts: Vec<ExpertSelection>,
    pub val_labels: Vec<usize>,
    pub test_labels: Vec<usize>,
    pub expert_val: EnsembleOutputs,
    pub expert_test: EnsembleOutputs,
    pub baseline_test: MemberOutputs,
    pub uniform_test: MemberOutputs,
    pub baseline_val: MemberOutputs,
    pub uniform_val: MemberOutputs,
    pub fusion: FusionOptions,
}

/// Trains every model of the run. `config` should already carry its seeds
/// (see [`PipelineConfig::seeded`]).
pub fn run_benchmark(bundle: &DatasetBundle, config: &PipelineConfig) -> Result<BenchmarkRun> {
    let partition = partition(bundle, config.thresholds)?;
    let (baseline, _) = train_baseline(bundle, &config.hidden, &config.baseline)?;
    let (uniform, _) = finetune_uniform_classifier(&baseline, bundle, &config.uniform)?;
    let experts = partition
        .subsets
        .iter()
        .map(|subset| select_expert_hyperparams(&baseline, subset, bundle, &config.grid, &config.expert))
        .collect::<Result<Vec<_>>>()?;
    let outputs = |data| -> Result<EnsembleOutputs> {
        EnsembleOutputs::new(
            experts
                .iter()
                .map(|s| expert_outputs(&s.expert, data))
                .collect::<Result<Vec<_>>>()?,
        )
    };
    Ok(BenchmarkRun {
        expert_val: outputs(&bundle.val)?,
        expert_test: outputs(&bundle.test)?,
        baseline_test: baseline_outputs("baseline", &baseline, &bundle.test)?,
        uniform_test: baseline_outputs("uniform", &uniform, &bundle.test)?,
        baseline_val: baseline_outputs("baseline", &baseline, &bundle.val)?,
        uniform_val: baseline_outputs("uniform", &uniform, &bundle.val)?,
        val_labels: bundle.val.labels().to_vec(),
        test_labels: bundle.test.labels().to_vec(),
        partition,
        baseline,
        uniform,
        experts,
        fusion: config.fusion.clone(),
    })
}

fn member_report(member: &MemberOutputs, labels: &[usize], folds: &FoldAssignment) -> Result<EvalReport> {
    let predictions: Vec<usize> = member
        .probabilities
        .iter()
        .map(|p| crate::network::argmax(p))
        .collect();
    fourfold_accuracy(&predictions, labels, folds)
}

/// A trained fusion together with its test posteriors and report.
#[derive(Debug, Clone)]
pub struct FusedResult {
    pub model: FusionModel,
    pub posteriors: Vec<FullPosterior>,
    pub report: EvalReport,
}

impl BenchmarkRun {
    pub fn folds(&self) -> &FoldAssignment {
        &self.partition.folds
    }

    pub fn baseline_report(&self) -> Result<EvalReport> {
        member_report(&self.baseline_test, &self.test_labels, self.folds())
    }

    pub fn uniform_report(&self) -> Result<EvalReport> {
        member_report(&self.uniform_test, &self.test_labels, self.folds())
    }

    pub fn oracle_report(&self) -> Result<EvalReport> {
        oracle_from_outputs(&self.expert_test, &self.test_labels, self.folds())
    }

    /// Fits `strategy` on the expert validation outputs and evaluates it on test.
    pub fn fused(&self, strategy: FusionStrategy) -> Result<FusedResult> {
        let model = FusionModel::train(strategy, &self.expert_val, &self.val_labels, &self.fusion)?;
        let posteriors = model.fuse_all(&self.expert_test)?;
        let report = fourfold_accuracy(&argmax_predictions(&posteriors), &self.test_labels, self.folds())?;
        Ok(FusedResult {
            model,
            posteriors,
            report,
        })
    }

    /// Report of a single expert used alone (its posterior expanded by g).
    pub fn single_expert_report(&self, index: usize) -> Result<EvalReport> {
        let solo = self.expert_test.select(&[index])?;
        let posteriors = FusionModel::Softvote.fuse_all(&solo)?;
        fourfold_accuracy(&argmax_predictions(&posteriors), &self.test_labels, self.folds())
    }
}
