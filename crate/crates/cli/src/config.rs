//! The run configuration file.
//!
//! One TOML file drives every subcommand. Relative paths resolve against the
//! directory holding the config file.

use std::path::{Path, PathBuf};

use cbexperts::dataset::{FoldThresholds, GeneratorConfig};
use cbexperts::experts::HyperGrid;
use cbexperts::fusion::{CalibrationOptions, FitOptions, FusionOptions, FusionStrategy, KlOptions};
use cbexperts::network::TrainConfig;
use cbexperts::pipeline::PipelineConfig;
use cbexperts::Error;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Root of every random stream in the run.
    pub seed: u64,
    pub dataset: DatasetSection,
    #[serde(default)]
    pub training: TrainingSection,
    #[serde(default)]
    pub experts: ExpertSection,
    #[serde(default)]
    pub fusion: FusionSection,
    #[serde(default)]
    pub paths: PathsSection,
}

/// Either `generate` (synthetic data written by `gen-data`) or `manifest`
/// (an existing bundle).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSection {
    #[serde(default)]
    pub thresholds: FoldThresholds,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub manifest: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generate: Option<GeneratorConfig>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageConfig {
    pub lr0: f64,
    pub epochs: usize,
    pub batch_size: usize,
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f64,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
}

fn default_weight_decay() -> f64 {
    TrainConfig::default().weight_decay
}

fn default_momentum() -> f64 {
    TrainConfig::default().momentum
}

impl StageConfig {
    fn from_train(c: &TrainConfig) -> Self {
        Self {
            lr0: c.lr0,
            epochs: c.epochs,
            batch_size: c.batch_size,
            weight_decay: c.weight_decay,
            momentum: c.momentum,
        }
    }

    fn apply(&self, c: &mut TrainConfig) {
        c.lr0 = self.lr0;
        c.epochs = self.epochs;
        c.batch_size = self.batch_size;
        c.weight_decay = self.weight_decay;
        c.momentum = self.momentum;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingSection {
    pub hidden: Vec<usize>,
    pub baseline: StageConfig,
    pub uniform: StageConfig,
    pub expert: StageConfig,
}

impl Default for TrainingSection {
    fn default() -> Self {
        let p = PipelineConfig::default();
        Self {
            hidden: p.hidden,
            baseline: StageConfig::from_train(&p.baseline),
            uniform: StageConfig::from_train(&p.uniform),
            expert: StageConfig::from_train(&p.expert),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExpertSection {
    pub rho_grid: Vec<f64>,
    pub frozen_grid: Vec<usize>,
}

impl Default for ExpertSection {
    fn default() -> Self {
        let grid = PipelineConfig::default().grid;
        Self {
            rho_grid: grid.rho_grid,
            frozen_grid: grid.frozen_grid,
        }
    }
}

/// Selector and stacker seeds are overwritten with values derived from the
/// run seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FusionSection {
    pub strategy: FusionStrategy,
    pub kl: KlOptions,
    pub selector: FitOptions,
    pub stacker: FitOptions,
    pub calibration: CalibrationOptions,
}

impl Default for FusionSection {
    fn default() -> Self {
        let o = FusionOptions::default();
        Self {
            strategy: FusionStrategy::Calibrate,
            kl: o.kl,
            selector: o.selector,
            stacker: o.stacker,
            calibration: o.calibration,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsSection {
    /// Where `gen-data` writes the bundle.
    pub data: PathBuf,
    pub checkpoints: PathBuf,
    pub dumps: PathBuf,
    pub reports: PathBuf,
}

impl Default for PathsSection {
    fn default() -> Self {
        Self {
            data: "data".into(),
            checkpoints: "checkpoints".into(),
            dumps: "dumps".into(),
            reports: "reports".into(),
        }
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> CliResult<Self> {
        let config: RunConfig = toml::from_str(text).map_err(|e| CliError::config("toml", e.message()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn to_toml(&self) -> CliResult<String> {
        toml::to_string(self).map_err(|e| CliError::config("toml", e.to_string()))
    }

    pub fn validate(&self) -> CliResult<()> {
        self.dataset.thresholds.validate()?;
        match (&self.dataset.manifest, &self.dataset.generate) {
            (Some(_), Some(_)) => {
                return Err(Error::config("dataset needs exactly one of `manifest` and `generate`, got both").into())
            }
            (None, None) => {
                return Err(Error::config("dataset needs exactly one of `manifest` and `generate`").into())
            }
            (None, Some(g)) => self.generator(g).validate()?,
            (Some(_), None) => {}
        }
        if self.training.hidden.contains(&0) {
            return Err(Error::config("hidden widths must be positive").into());
        }
        let pipeline = self.pipeline();
        let layers = pipeline.hidden.len() + 1;
        for stage in [&pipeline.baseline, &pipeline.uniform, &pipeline.expert] {
            let mut check = stage.clone();
            check.frozen_layers = 0;
            check.validate(layers)?;
        }
        pipeline.grid.validate()?;
        if let Some(&rho) = self.experts.rho_grid.iter().find(|r| !(r.is_finite() && **r >= 1.0)) {
            return Err(Error::config(format!("rho values must be >= 1, got {rho}")).into());
        }
        if let Some(&f) = self.experts.frozen_grid.iter().find(|&&f| f >= layers) {
            return Err(Error::config(format!("frozen_grid entry {f} leaves no trainable layer")).into());
        }
        Ok(())
    }

    /// Generator settings with the dataset thresholds applied.
    pub fn generator(&self, g: &GeneratorConfig) -> GeneratorConfig {
        GeneratorConfig {
            thresholds: self.dataset.thresholds,
            ..g.clone()
        }
    }

    /// Library pipeline settings with every stage seed derived from `seed`.
    pub fn pipeline(&self) -> PipelineConfig {
        let mut p = PipelineConfig {
            hidden: self.training.hidden.clone(),
            thresholds: self.dataset.thresholds,
            grid: HyperGrid {
                rho_grid: self.experts.rho_grid.clone(),
                frozen_grid: self.experts.frozen_grid.clone(),
            },
            fusion: FusionOptions {
                kl: self.fusion.kl.clone(),
                selector: self.fusion.selector.clone(),
                stacker: self.fusion.stacker.clone(),
                calibration: self.fusion.calibration.clone(),
            },
            ..PipelineConfig::default()
        };
        self.training.baseline.apply(&mut p.baseline);
        self.training.uniform.apply(&mut p.uniform);
        self.training.expert.apply(&mut p.expert);
        p.seeded(self.seed)
    }
}

/// A parsed config with its paths resolved.
#[derive(Debug, Clone)]
pub struct LoadedConfig {
    pub config: RunConfig,
    pub base: PathBuf,
}

impl LoadedConfig {
    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::config("io", format!("{}: {e}", path.display())))?;
        let config = RunConfig::parse(&text)?;
        let base = path
            .parent()
            .filter(|p| !p.as_os_str().is_empty())
            .unwrap_or(Path::new("."))
            .to_path_buf();
        let loaded = Self { config, base };
        if let Some(m) = loaded.config.dataset.manifest.as_ref().map(|m| loaded.resolve(m)) {
            if !m.is_file() {
                return Err(CliError::config("io", format!("manifest {} not found", m.display())));
            }
        }
        Ok(loaded)
    }

    pub fn resolve(&self, path: &Path) -> PathBuf {
        self.base.join(path)
    }

    pub fn manifest(&self) -> PathBuf {
        match &self.config.dataset.manifest {
            Some(m) => self.resolve(m),
            None => self.data_dir().join("manifest.toml"),
        }
    }

    pub fn data_dir(&self) -> PathBuf {
        self.resolve(&self.config.paths.data)
    }

    pub fn checkpoints(&self) -> PathBuf {
        self.resolve(&self.config.paths.checkpoints)
    }

    pub fn dumps(&self) -> PathBuf {
        self.resolve(&self.config.paths.dumps)
    }

    pub fn reports(&self) -> PathBuf {
        self.resolve(&self.config.paths.reports)
    }
}
