use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{DatasetBundle, EmbeddingDataset, Fold, FoldThresholds};
use crate::error::{Error, Result};
use crate::rng::{self, SeededRng};

/// Synthetic long-tailed dataset: one isotropic Gaussian blob per class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub classes: usize,
    pub dim: usize,
    /// Training frequency of the most frequent class.
    pub n_max: usize,
    /// Power-law exponent of the frequency curve.
    pub alpha: f64,
    pub n_val_per_class: usize,
    pub n_test_per_class: usize,
    /// Standard deviation of each blob around its mean.
    pub noise_scale: f64,
    #[serde(default)]
    pub thresholds: FoldThresholds,
}

impl GeneratorConfig {
    /// The 60-class benchmark used throughout the test suites.
    pub fn synth60() -> Self {
        Self {
            classes: 60,
            dim: 16,
            n_max: 500,
            alpha: 1.2,
            n_val_per_class: 20,
            n_test_per_class: 50,
            noise_scale: 0.82,
            thresholds: FoldThresholds::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.thresholds.validate()?;
        if self.classes < 3 {
            return Err(Error::config("generator needs at least 3 classes"));
        }
        if self.dim < 2 {
            return Err(Error::config("generator needs dimension at least 2"));
        }
        if self.n_max < self.thresholds.few_max {
            return Err(Error::config(format!(
                "n_max {} below the Fewshot bound {}",
                self.n_max, self.thresholds.few_max
            )));
        }
        if !(self.alpha.is_finite() && self.alpha >= 0.0) {
            return Err(Error::config("alpha must be finite and non-negative"));
        }
        if !(self.noise_scale.is_finite() && self.noise_scale > 0.0) {
            return Err(Error::config("noise_scale must be finite and positive"));
        }
        if self.n_val_per_class == 0 || self.n_test_per_class == 0 {
            return Err(Error::config("val and test need at least one sample per class"));
        }
        Ok(())
    }
}

/// Training frequency of class `c`: `max(round(n_max * (c+1)^-alpha), 1)`.
pub fn longtail_frequencies(config: &GeneratorConfig) -> Vec<usize> {
    (0..config.classes)
        .map(|c| {
            let f = config.n_max as f64 * ((c + 1) as f64).powf(-config.alpha);
            (f.round() as usize).max(1)
        })
        .collect()
}

/// Draws a bundle deterministically from `seed`.
///
/// Class means are drawn first (standard normal per coordinate), then the
/// train, val and test samples in class order.
pub fn generate_longtailed(config: &GeneratorConfig, seed: u64) -> Result<DatasetBundle> {
    config.validate()?;
    let frequencies = longtail_frequencies(config);
    let mut fold_sizes = [0usize; 3];
    for &f in &frequencies {
        fold_sizes[config.thresholds.fold_of(f).index()] += 1;
    }
    if let Some(fold) = Fold::ALL.into_iter().find(|f| fold_sizes[f.index()] == 0) {
        return Err(Error::EmptyFold(fold));
    }

    let mut rng = rng::seeded(seed);
    let means: Vec<Vec<f64>> = (0..config.classes)
        .map(|_| (0..config.dim).map(|_| gaussian(&mut rng)).collect())
        .collect();

    let mut draw_split = |counts: &dyn Fn(usize) -> usize| -> Result<EmbeddingDataset> {
        let mut features = Vec::new();
        let mut labels = Vec::new();
        for (class, mean) in means.iter().enumerate() {
            for _ in 0..counts(class) {
                features.extend(
                    mean.iter()
                        .map(|&m| m + config.noise_scale * gaussian(&mut rng)),
                );
                labels.push(class);
            }
        }
        EmbeddingDataset::new(config.dim, config.classes, features, labels)
    };

    let train = draw_split(&|c| frequencies[c])?;
    let val = draw_split(&|_| config.n_val_per_class)?;
    let test = draw_split(&|_| config.n_test_per_class)?;
    DatasetBundle::new(train, val, test)
}

fn gaussian(rng: &mut SeededRng) -> f64 {
    StandardNormal.sample(rng)
}
