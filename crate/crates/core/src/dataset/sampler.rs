use rand::Rng;
use serde::{Deserialize, Serialize};

use super::EmbeddingDataset;
use crate::error::{Error, Result};
use crate::rng::SeededRng;

/// How training batches are drawn.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SamplerMode {
    /// Uniform over samples.
    InstanceBalanced,
    /// Uniform over classes, then uniform within the class.
    UniformClass,
    /// Instance-balanced, but a sample carrying the reject label (the last
    /// label of the dataset) is kept only with probability `1 / rho`.
    RejectUndersampled { rho: f64 },
}

impl SamplerMode {
    pub fn validate(&self) -> Result<()> {
        match *self {
            SamplerMode::RejectUndersampled { rho } if !(rho.is_finite() && rho >= 1.0) => Err(
                Error::config(format!("undersampling ratio must be >= 1, got {rho}")),
            ),
            _ => Ok(()),
        }
    }
}

/// Draws batches of sample indices from one dataset.
pub struct BatchSampler<'a> {
    dataset: &'a EmbeddingDataset,
    mode: SamplerMode,
    by_class: Vec<Vec<usize>>,
}

impl<'a> BatchSampler<'a> {
    pub fn new(dataset: &'a EmbeddingDataset, mode: SamplerMode) -> Result<Self> {
        mode.validate()?;
        if dataset.is_empty() {
            return Err(Error::config("cannot sample from an empty dataset"));
        }
        let by_class = dataset.indices_by_class();
        if mode == SamplerMode::UniformClass {
            if let Some(class) = by_class.iter().position(Vec::is_empty) {
                return Err(Error::EmptyClass(class));
            }
        }
        Ok(Self {
            dataset,
            mode,
            by_class,
        })
    }

    pub fn mode(&self) -> SamplerMode {
        self.mode
    }

    /// Expected number of samples one pass over the data visits; with
    /// undersampling the reject class contributes `n_reject / rho`.
    pub fn effective_len(&self) -> f64 {
        match self.mode {
            SamplerMode::RejectUndersampled { rho } => {
                let reject = self.by_class.last().map_or(0, Vec::len);
                (self.dataset.len() - reject) as f64 + reject as f64 / rho
            }
            _ => self.dataset.len() as f64,
        }
    }

    pub fn draw(&self, batch_size: usize, rng: &mut SeededRng) -> Result<Vec<usize>> {
        if batch_size == 0 {
            return Err(Error::config("batch size must be at least 1"));
        }
        let n = self.dataset.len();
        let reject_label = self.dataset.class_count() - 1;
        let batch = (0..batch_size)
            .map(|_| match self.mode {
                SamplerMode::InstanceBalanced => rng.random_range(0..n),
                SamplerMode::UniformClass => {
                    let members = &self.by_class[rng.random_range(0..self.by_class.len())];
                    members[rng.random_range(0..members.len())]
                }
                SamplerMode::RejectUndersampled { rho } => loop {
                    let i = rng.random_range(0..n);
                    if self.dataset.label(i) != reject_label || rng.random::<f64>() * rho < 1.0 {
                        break i;
                    }
                },
            })
            .collect();
        Ok(batch)
    }
}

/// One batch of `(feature, label)` pairs.
pub fn draw_batch<'a>(
    dataset: &'a EmbeddingDataset,
    mode: SamplerMode,
    batch_size: usize,
    rng: &mut SeededRng,
) -> Result<Vec<(&'a [f64], usize)>> {
    let sampler = BatchSampler::new(dataset, mode)?;
    Ok(sampler
        .draw(batch_size, rng)?
        .into_iter()
        .map(|i| (dataset.feature(i), dataset.label(i)))
        .collect())
}
