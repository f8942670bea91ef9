//! Subcommand implementations. Every output goes through `write_atomic`.

use std::path::{Path, PathBuf};

use cbexperts::dataset::{generate_longtailed, load_embeddings, write_bundle, DatasetBundle, EmbeddingDataset, Fold};
use cbexperts::evaluation::{
    ablation_to_text, argmax_predictions, expert_confusion_matrix, fourfold_accuracy, histograms_to_csv,
    msp_histogram, oracle_from_outputs, take_one_out_ablation, AblationFusion, EvalReport, ExpertConfusionMatrix,
    MspSource,
};
use cbexperts::experts::{
    baseline_outputs, expert_outputs, finetune_uniform_classifier, load_checkpoint, save_checkpoint,
    select_expert_hyperparams, train_baseline, BaselineModel, Checkpoint, ExpertModel,
};
use cbexperts::fsutil::write_atomic;
use cbexperts::fusion::{
    apply_calibration, ingest_external_posteriors, write_full_posteriors, write_partial_posteriors,
    EnsembleOutputs, ExternalPosteriorTable, FullPosterior, FusionModel, FusionStrategy,
};
use cbexperts::pipeline::{partition, Partition};
use cbexperts::Error;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::LoadedConfig;
use crate::error::{CliError, CliResult};

const FUSION_FORMAT: &str = "cbexperts.fusion";
const FUSION_VERSION: u32 = 1;
const MODEL_FORMAT: &str = "cbexperts.model";

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Split {
    Val,
    Test,
}

impl Split {
    fn as_str(self) -> &'static str {
        match self {
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    fn of(self, bundle: &DatasetBundle) -> &EmbeddingDataset {
        match self {
            Split::Val => &bundle.val,
            Split::Test => &bundle.test,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum AblationStrategy {
    Softvote,
    Calibrate,
}

#[derive(Serialize, Deserialize)]
struct FusionFile {
    format: String,
    version: u32,
    model: FusionModel,
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(Error::from)?;
    text.push('\n');
    write_text(path, &text)
}

fn write_text(path: &Path, text: &str) -> CliResult<()> {
    write_atomic(path, text.as_bytes())?;
    println!("wrote {}", path.display());
    Ok(())
}

fn require(path: &Path, producer: &str) -> CliResult<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(CliError::data(
            "missing_artifact",
            format!("{} not found (produced by `{producer}`)", path.display()),
        ))
    }
}

fn load_bundle(cfg: &LoadedConfig) -> CliResult<DatasetBundle> {
    let manifest = cfg.manifest();
    require(&manifest, "gen-data")?;
    let loaded = load_embeddings(&manifest)?;
    for w in &loaded.warnings {
        log::warn!("{} split is not class-balanced: {:?}", w.split, w.class_counts);
    }
    Ok(loaded.bundle)
}

fn load_partition(cfg: &LoadedConfig, bundle: &DatasetBundle) -> CliResult<Partition> {
    Ok(partition(bundle, cfg.config.dataset.thresholds)?)
}

fn checkpoint_path(cfg: &LoadedConfig, name: &str) -> PathBuf {
    cfg.checkpoints().join(format!("{name}.json"))
}

fn fusion_path(cfg: &LoadedConfig, strategy: FusionStrategy) -> PathBuf {
    cfg.checkpoints().join(format!("fusion_{}.json", strategy.as_str()))
}

fn load_baseline(cfg: &LoadedConfig, name: &str) -> CliResult<BaselineModel> {
    let path = checkpoint_path(cfg, name);
    require(&path, "train-baseline")?;
    match load_checkpoint(&path)?.1 {
        Checkpoint::Baseline(m) => Ok(m),
        Checkpoint::Expert(_) => Err(CliError::data("wrong_artifact", format!("{} is an expert", path.display()))),
    }
}

fn load_experts(cfg: &LoadedConfig) -> CliResult<Vec<ExpertModel>> {
    Fold::ALL
        .iter()
        .map(|fold| {
            let path = checkpoint_path(cfg, fold.as_str());
            require(&path, "train-experts")?;
            match load_checkpoint(&path)?.1 {
                Checkpoint::Expert(e) if e.expert() == *fold => Ok(e),
                _ => Err(CliError::data(
                    "wrong_artifact",
                    format!("{} is not the {fold} expert", path.display()),
                )),
            }
        })
        .collect()
}

fn ensemble(experts: &[ExpertModel], data: &EmbeddingDataset) -> CliResult<EnsembleOutputs> {
    let members = experts
        .par_iter()
        .map(|e| expert_outputs(e, data))
        .collect::<cbexperts::Result<Vec<_>>>()?;
    Ok(EnsembleOutputs::new(members)?)
}

fn read_fusion_file(path: &Path) -> CliResult<FusionModel> {
    let file: FusionFile = serde_json::from_str(&std::fs::read_to_string(path).map_err(Error::from)?)
        .map_err(Error::from)?;
    if file.format != FUSION_FORMAT || file.version != FUSION_VERSION {
        return Err(CliError::data(
            "wrong_artifact",
            format!("{}: unsupported fusion file {} v{}", path.display(), file.format, file.version),
        ));
    }
    Ok(file.model)
}

fn load_fusion(cfg: &LoadedConfig, strategy: FusionStrategy) -> CliResult<FusionModel> {
    let path = fusion_path(cfg, strategy);
    require(&path, "train-fusion")?;
    read_fusion_file(&path)
}

fn loss_csv(trace: &[f64]) -> String {
    let mut out = String::from("epoch,loss\n");
    for (i, l) in trace.iter().enumerate() {
        out.push_str(&format!("{},{l}\n", i + 1));
    }
    out
}

fn write_report(cfg: &LoadedConfig, stem: &str, title: &str, report: &EvalReport) -> CliResult<()> {
    let dir = cfg.reports();
    write_json(&dir.join(format!("{stem}.json")), report)?;
    write_text(&dir.join(format!("{stem}.txt")), &report.to_text(title))
}

pub fn gen_data(cfg: &LoadedConfig) -> CliResult<()> {
    let g = cfg.config.dataset.generate.as_ref().ok_or_else(|| {
        CliError::config("invalid_config", "gen-data needs a [dataset.generate] section")
    })?;
    let bundle = generate_longtailed(&cfg.config.generator(g), cfg.config.seed)?;
    let manifest = write_bundle(&cfg.data_dir(), &bundle)?;
    write_text(&cfg.data_dir().join("run.toml"), &cfg.config.to_toml()?)?;
    let parts = load_partition(cfg, &bundle)?;
    log::info!("fold class counts {:?}", parts.folds.counts());
    println!("wrote {}", manifest.display());
    Ok(())
}

pub fn train_baseline_cmd(cfg: &LoadedConfig) -> CliResult<()> {
    let bundle = load_bundle(cfg)?;
    let pipeline = cfg.config.pipeline();
    let (baseline, trace) = train_baseline(&bundle, &pipeline.hidden, &pipeline.baseline)?;
    let (uniform, uniform_trace) = finetune_uniform_classifier(&baseline, &bundle, &pipeline.uniform)?;
    let ckpt = checkpoint_path(cfg, "baseline");
    save_checkpoint(&ckpt, "baseline", &Checkpoint::Baseline(baseline))?;
    println!("wrote {}", ckpt.display());
    let ckpt = checkpoint_path(cfg, "uniform");
    save_checkpoint(&ckpt, "uniform", &Checkpoint::Baseline(uniform))?;
    println!("wrote {}", ckpt.display());
    write_text(&cfg.reports().join("loss_baseline.csv"), &loss_csv(&trace))?;
    write_text(&cfg.reports().join("loss_uniform.csv"), &loss_csv(&uniform_trace))
}

pub fn train_experts_cmd(cfg: &LoadedConfig) -> CliResult<()> {
    let bundle = load_bundle(cfg)?;
    let parts = load_partition(cfg, &bundle)?;
    let baseline = load_baseline(cfg, "baseline")?;
    let pipeline = cfg.config.pipeline();
    let selections = parts
        .subsets
        .par_iter()
        .map(|s| select_expert_hyperparams(&baseline, s, &bundle, &pipeline.grid, &pipeline.expert))
        .collect::<cbexperts::Result<Vec<_>>>()?;
    for sel in selections {
        let name = sel.expert.expert().as_str();
        let mut table = String::from("rho,frozen_layers,val_accuracy,selected\n");
        for row in &sel.table {
            let selected = row.rho == sel.rho && row.frozen_layers == sel.frozen_layers;
            table.push_str(&format!(
                "{},{},{},{}\n",
                row.rho, row.frozen_layers, row.val_accuracy, selected as u8
            ));
        }
        let ckpt = checkpoint_path(cfg, name);
        save_checkpoint(&ckpt, name, &Checkpoint::Expert(sel.expert))?;
        println!("wrote {}", ckpt.display());
        write_text(&cfg.reports().join(format!("selection_{name}.csv")), &table)?;
        write_text(&cfg.reports().join(format!("loss_{name}.csv")), &loss_csv(&sel.loss_trace))?;
    }
    Ok(())
}

pub fn dump_posteriors(cfg: &LoadedConfig, model: &Path, split: Split) -> CliResult<()> {
    let text = std::fs::read_to_string(model)
        .map_err(|e| CliError::data("missing_artifact", format!("{}: {e}", model.display())))?;
    let format = serde_json::from_str::<serde_json::Value>(&text)
        .map_err(Error::from)?
        .get("format")
        .and_then(|f| f.as_str().map(str::to_owned))
        .unwrap_or_default();
    let bundle = load_bundle(cfg)?;
    let data = split.of(&bundle);
    let ids: Vec<u64> = (0..data.len() as u64).collect();
    let stem = model
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "model".into());
    let out = cfg.dumps().join(format!("{stem}_{}.csv", split.as_str()));
    match format.as_str() {
        MODEL_FORMAT => match load_checkpoint(model)? {
            (name, Checkpoint::Baseline(m)) => {
                let rows = baseline_outputs(&name, &m, data)?
                    .probabilities
                    .into_iter()
                    .map(FullPosterior::normalized)
                    .collect::<cbexperts::Result<Vec<_>>>()?;
                write_full_posteriors(&out, &name, &ids, &rows)?;
            }
            (name, Checkpoint::Expert(e)) => {
                let member = expert_outputs(&e, data)?;
                write_partial_posteriors(&out, &name, &e.subset, &ids, &member.probabilities)?;
            }
        },
        FUSION_FORMAT => {
            let fusion = read_fusion_file(model)?;
            let experts = load_experts(cfg)?;
            let rows = fusion.fuse_all(&ensemble(&experts, data)?)?;
            write_full_posteriors(&out, &format!("experts_{}", fusion.strategy().as_str()), &ids, &rows)?;
        }
        other => {
            return Err(CliError::data(
                "wrong_artifact",
                format!("{} has unknown format `{other}`", model.display()),
            ))
        }
    }
    println!("wrote {}", out.display());
    Ok(())
}

pub fn train_fusion(cfg: &LoadedConfig, strategy: FusionStrategy) -> CliResult<()> {
    let bundle = load_bundle(cfg)?;
    let experts = load_experts(cfg)?;
    let val = ensemble(&experts, &bundle.val)?;
    let model = FusionModel::train(strategy, &val, bundle.val.labels(), &cfg.config.pipeline().fusion)?;
    write_json(
        &fusion_path(cfg, strategy),
        &FusionFile {
            format: FUSION_FORMAT.into(),
            version: FUSION_VERSION,
            model,
        },
    )
}

pub fn evaluate(cfg: &LoadedConfig, strategy: FusionStrategy) -> CliResult<()> {
    let bundle = load_bundle(cfg)?;
    let parts = load_partition(cfg, &bundle)?;
    let fusion = load_fusion(cfg, strategy)?;
    let experts = load_experts(cfg)?;
    let fused = fusion.fuse_all(&ensemble(&experts, &bundle.test)?)?;
    let report = fourfold_accuracy(&argmax_predictions(&fused), bundle.test.labels(), &parts.folds)?;
    let name = strategy.as_str();
    write_report(cfg, &format!("eval_{name}"), &format!("experts ({name})"), &report)
}

/// Evaluates one checkpoint on its own: baselines by argmax, experts with
/// their posterior expanded to all classes.
pub fn evaluate_model(cfg: &LoadedConfig, model: &Path) -> CliResult<()> {
    let bundle = load_bundle(cfg)?;
    let parts = load_partition(cfg, &bundle)?;
    require(model, "train-baseline` or `train-experts")?;
    let (name, ckpt) = load_checkpoint(model)?;
    let predictions: Vec<usize> = match &ckpt {
        Checkpoint::Baseline(m) => baseline_outputs(&name, m, &bundle.test)?
            .probabilities
            .iter()
            .map(|p| cbexperts::network::argmax(p))
            .collect(),
        Checkpoint::Expert(e) => {
            let solo = EnsembleOutputs::new(vec![expert_outputs(e, &bundle.test)?])?;
            argmax_predictions(&FusionModel::Softvote.fuse_all(&solo)?)
        }
    };
    let report = fourfold_accuracy(&predictions, bundle.test.labels(), &parts.folds)?;
    write_report(cfg, &format!("eval_{name}"), &name, &report)
}

pub fn oracle(cfg: &LoadedConfig) -> CliResult<()> {
    let bundle = load_bundle(cfg)?;
    let parts = load_partition(cfg, &bundle)?;
    let experts = load_experts(cfg)?;
    let report = oracle_from_outputs(&ensemble(&experts, &bundle.test)?, bundle.test.labels(), &parts.folds)?;
    write_report(cfg, "oracle", "experts (oracle)", &report)
}

fn ingest_all(paths: &[PathBuf], class_count: usize) -> CliResult<Vec<ExternalPosteriorTable>> {
    paths
        .iter()
        .map(|p| {
            require(p, "dump-posteriors")?;
            Ok(ingest_external_posteriors(p, class_count)?)
        })
        .collect()
}

pub fn ablate(
    cfg: &LoadedConfig,
    models: &[PathBuf],
    split: Split,
    strategy: AblationStrategy,
    val_models: &[PathBuf],
) -> CliResult<()> {
    let bundle = load_bundle(cfg)?;
    let parts = load_partition(cfg, &bundle)?;
    let c = bundle.class_count();
    let tables = ingest_all(models, c)?;
    let labels = split.of(&bundle).labels().to_vec();
    let labels_by_id = |id: u64| labels.get(usize::try_from(id).ok()?).copied();
    let rows = match strategy {
        AblationStrategy::Softvote => {
            if !val_models.is_empty() {
                log::warn!("--val-models is only used with --strategy calibrate");
            }
            take_one_out_ablation(&tables, &labels_by_id, &parts.folds, AblationFusion::SoftVote)?
        }
        AblationStrategy::Calibrate => {
            if val_models.len() != models.len() {
                return Err(CliError::config(
                    "invalid_config",
                    "calibrated ablation needs one --val-models file per --models file, in the same order",
                ));
            }
            let val = ingest_all(val_models, c)?;
            let ids = &val[0].sample_ids;
            if let Some(t) = val.iter().find(|t| &t.sample_ids != ids) {
                return Err(Error::KeyMismatch(format!("`{}` lists validation samples in a different order", t.name)).into());
            }
            let val_labels = ids
                .iter()
                .map(|&id| {
                    bundle
                        .val
                        .labels()
                        .get(id as usize)
                        .copied()
                        .ok_or_else(|| Error::KeyMismatch(format!("no validation sample {id}")))
                })
                .collect::<cbexperts::Result<Vec<_>>>()?;
            let options = cfg.config.pipeline().fusion.calibration;
            take_one_out_ablation(
                &tables,
                &labels_by_id,
                &parts.folds,
                AblationFusion::Calibrated {
                    val: &val,
                    val_labels: &val_labels,
                    options: &options,
                },
            )?
        }
    };
    let stem = match strategy {
        AblationStrategy::Softvote => "ablation_softvote",
        AblationStrategy::Calibrate => "ablation_calibrate",
    };
    write_json(&cfg.reports().join(format!("{stem}.json")), &rows)?;
    write_text(&cfg.reports().join(format!("{stem}.txt")), &ablation_to_text(&rows))
}

#[derive(Serialize)]
struct ConfusionEntry<'a> {
    strategy: &'a str,
    diagonal_mass: f64,
    matrix: &'a ExpertConfusionMatrix,
}

pub fn report(cfg: &LoadedConfig, strategy: FusionStrategy, msp: MspSource, bins: usize) -> CliResult<()> {
    let bundle = load_bundle(cfg)?;
    let parts = load_partition(cfg, &bundle)?;
    let experts = load_experts(cfg)?;
    let test = ensemble(&experts, &bundle.test)?;
    let labels = bundle.test.labels();
    let mut strategies = vec![FusionStrategy::Softvote];
    if strategy != FusionStrategy::Softvote {
        strategies.push(strategy);
    }
    let mut matrices = Vec::new();
    for &s in &strategies {
        let fusion = if s == FusionStrategy::Softvote {
            FusionModel::Softvote
        } else {
            load_fusion(cfg, s)?
        };
        let fused = fusion.fuse_all(&test)?;
        let matrix = expert_confusion_matrix(&test, &fused, labels, &parts.folds)?;
        write_text(&cfg.reports().join(format!("confusion_{}.csv", s.as_str())), &matrix.to_csv())?;
        matrices.push((s, matrix.diagonal_mass()?, matrix, fusion));
    }
    let entries: Vec<ConfusionEntry> = matrices
        .iter()
        .map(|(s, mass, m, _)| ConfusionEntry {
            strategy: s.as_str(),
            diagonal_mass: *mass,
            matrix: m,
        })
        .collect();
    write_json(&cfg.reports().join("confusion.json"), &entries)?;

    // MSP population: Manyshot test samples the Manyshot expert gets right.
    let many = &test.members()[0];
    let subset = &experts[0].subset;
    let population: Vec<usize> = (0..labels.len())
        .filter(|&i| parts.folds.fold(labels[i]) == Fold::Manyshot)
        .filter(|&i| subset.local(labels[i]) == Some(cbexperts::network::argmax(&many.probabilities[i])))
        .collect();
    let label = "manyshot samples classified correctly by the manyshot expert";
    for (s, _, _, fusion) in &matrices {
        let outputs = match fusion {
            FusionModel::Calibrate { params } => apply_calibration(&test, params)?,
            FusionModel::Softvote => test.clone(),
            _ => continue,
        };
        let histograms = [0, 2]
            .iter()
            .map(|&m| msp_histogram(&outputs.members()[m], &population, bins, msp, label))
            .collect::<cbexperts::Result<Vec<_>>>()?;
        write_text(
            &cfg.reports().join(format!("msp_{}.csv", s.as_str())),
            &histograms_to_csv(&histograms),
        )?;
    }
    Ok(())
}
