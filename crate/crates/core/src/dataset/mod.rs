//! Long-tailed embedding datasets: storage, fold assignment, class-balanced
//! partitioning and expert relabelling.

mod generate;
mod io;
mod sampler;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use generate::{generate_longtailed, longtail_frequencies, GeneratorConfig};
pub use io::{
    load_bundle_files, load_embeddings, read_embedding_csv, write_bundle, write_embedding_csv,
    BalanceWarning, BundleManifest, LoadedBundle,
};
pub use sampler::{draw_batch, BatchSampler, SamplerMode};

/// Labelled feature vectors stored row-major in one flat buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingDataset {
    dim: usize,
    class_count: usize,
    features: Vec<f64>,
    labels: Vec<usize>,
    class_frequency: Vec<usize>,
}

impl EmbeddingDataset {
    /// Builds a dataset from a flat row-major feature buffer.
    pub fn new(
        dim: usize,
        class_count: usize,
        features: Vec<f64>,
        labels: Vec<usize>,
    ) -> Result<Self> {
        if dim == 0 {
            return Err(Error::config("feature dimension must be at least 1"));
        }
        if class_count == 0 {
            return Err(Error::config("class count must be at least 1"));
        }
        if features.len() != labels.len() * dim {
            return Err(Error::config(format!(
                "{} feature values do not form {} rows of dimension {}",
                features.len(),
                labels.len(),
                dim
            )));
        }
        let mut class_frequency = vec![0; class_count];
        for (row, &label) in labels.iter().enumerate() {
            if label >= class_count {
                return Err(Error::LabelOutOfRange {
                    row,
                    label,
                    class_count,
                });
            }
            class_frequency[label] += 1;
        }
        Ok(Self {
            dim,
            class_count,
            features,
            labels,
            class_frequency,
        })
    }

    pub fn from_rows(
        dim: usize,
        class_count: usize,
        rows: &[Vec<f64>],
        labels: Vec<usize>,
    ) -> Result<Self> {
        if rows.len() != labels.len() {
            return Err(Error::config(format!(
                "{} feature rows but {} labels",
                rows.len(),
                labels.len()
            )));
        }
        let mut features = Vec::with_capacity(rows.len() * dim);
        for (row, values) in rows.iter().enumerate() {
            if values.len() != dim {
                return Err(Error::DimensionMismatch {
                    row,
                    expected: dim,
                    found: values.len(),
                });
            }
            features.extend_from_slice(values);
        }
        Self::new(dim, class_count, features, labels)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn label(&self, index: usize) -> usize {
        self.labels[index]
    }

    pub fn feature(&self, index: usize) -> &[f64] {
        &self.features[index * self.dim..(index + 1) * self.dim]
    }

    pub fn features_flat(&self) -> &[f64] {
        &self.features
    }

    /// Number of samples per class in this split.
    pub fn class_frequency(&self) -> &[usize] {
        &self.class_frequency
    }

    pub fn iter(&self) -> impl Iterator<Item = (&[f64], usize)> + '_ {
        self.features
            .chunks_exact(self.dim)
            .zip(self.labels.iter().copied())
    }

    /// Sample indices grouped by label.
    pub fn indices_by_class(&self) -> Vec<Vec<usize>> {
        let mut groups = vec![Vec::new(); self.class_count];
        for (i, &label) in self.labels.iter().enumerate() {
            groups[label].push(i);
        }
        groups
    }

    /// True when every class has the same number of samples.
    pub fn is_balanced(&self) -> bool {
        self.class_frequency.windows(2).all(|w| w[0] == w[1])
    }

    pub fn with_labels(&self, class_count: usize, labels: Vec<usize>) -> Result<Self> {
        Self::new(self.dim, class_count, self.features.clone(), labels)
    }
}

/// Train (long-tailed), validation and test (balanced) splits.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetBundle {
    pub train: EmbeddingDataset,
    pub val: EmbeddingDataset,
    pub test: EmbeddingDataset,
}

impl DatasetBundle {
    pub fn new(
        train: EmbeddingDataset,
        val: EmbeddingDataset,
        test: EmbeddingDataset,
    ) -> Result<Self> {
        for (name, split) in [("val", &val), ("test", &test)] {
            if split.class_count() != train.class_count() || split.dim() != train.dim() {
                return Err(Error::config(format!(
                    "{name} split has {} classes of dimension {}, train has {} of dimension {}",
                    split.class_count(),
                    split.dim(),
                    train.class_count(),
                    train.dim()
                )));
            }
        }
        Ok(Self { train, val, test })
    }

    pub fn class_count(&self) -> usize {
        self.train.class_count()
    }

    pub fn dim(&self) -> usize {
        self.train.dim()
    }
}

/// Frequency bucket of a class; also names the expert owning that bucket.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Fold {
    Manyshot,
    Mediumshot,
    Fewshot,
}

impl Fold {
    pub const ALL: [Fold; 3] = [Fold::Manyshot, Fold::Mediumshot, Fold::Fewshot];

    pub fn index(self) -> usize {
        match self {
            Fold::Manyshot => 0,
            Fold::Mediumshot => 1,
            Fold::Fewshot => 2,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Fold::Manyshot => "manyshot",
            Fold::Mediumshot => "mediumshot",
            Fold::Fewshot => "fewshot",
        }
    }
}

impl fmt::Display for Fold {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Fold::Manyshot => "Manyshot",
            Fold::Mediumshot => "Mediumshot",
            Fold::Fewshot => "Fewshot",
        })
    }
}

impl FromStr for Fold {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "manyshot" | "many" => Ok(Fold::Manyshot),
            "mediumshot" | "medium" => Ok(Fold::Mediumshot),
            "fewshot" | "few" => Ok(Fold::Fewshot),
            other => Err(Error::config(format!("unknown fold `{other}`"))),
        }
    }
}

/// Frequency thresholds separating the folds.
///
/// Manyshot iff `frequency >= many_min`, Fewshot iff `frequency < few_max`,
/// Mediumshot otherwise.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldThresholds {
    pub many_min: usize,
    pub few_max: usize,
}

impl Default for FoldThresholds {
    fn default() -> Self {
        Self {
            many_min: 100,
            few_max: 20,
        }
    }
}

impl FoldThresholds {
    pub fn validate(&self) -> Result<()> {
        if self.few_max == 0 || self.many_min <= self.few_max {
            return Err(Error::config(format!(
                "fold thresholds need many_min > few_max > 0, got many_min={} few_max={}",
                self.many_min, self.few_max
            )));
        }
        Ok(())
    }

    pub fn fold_of(&self, frequency: usize) -> Fold {
        if frequency >= self.many_min {
            Fold::Manyshot
        } else if frequency < self.few_max {
            Fold::Fewshot
        } else {
            Fold::Mediumshot
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldAssignment {
    folds: Vec<Fold>,
    thresholds: FoldThresholds,
}

impl FoldAssignment {
    pub fn from_frequencies(frequencies: &[usize], thresholds: FoldThresholds) -> Result<Self> {
        thresholds.validate()?;
        Ok(Self {
            folds: frequencies.iter().map(|&f| thresholds.fold_of(f)).collect(),
            thresholds,
        })
    }

    pub fn fold(&self, class: usize) -> Fold {
        self.folds[class]
    }

    pub fn folds(&self) -> &[Fold] {
        &self.folds
    }

    pub fn thresholds(&self) -> FoldThresholds {
        self.thresholds
    }

    pub fn class_count(&self) -> usize {
        self.folds.len()
    }

    pub fn classes_in(&self, fold: Fold) -> Vec<usize> {
        (0..self.folds.len())
            .filter(|&c| self.folds[c] == fold)
            .collect()
    }

    /// Number of classes per fold in Manyshot, Mediumshot, Fewshot order.
    pub fn counts(&self) -> [usize; 3] {
        let mut counts = [0; 3];
        for fold in &self.folds {
            counts[fold.index()] += 1;
        }
        counts
    }
}

/// Assigns every class of the training split to a fold by its frequency.
pub fn assign_folds(train: &EmbeddingDataset, thresholds: FoldThresholds) -> Result<FoldAssignment> {
    FoldAssignment::from_frequencies(train.class_frequency(), thresholds)
}

/// Contiguous range of frequency-sorted classes owned by one expert.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "SubsetRepr", into = "SubsetRepr")]
pub struct SubsetSpec {
    expert: Fold,
    class_count: usize,
    classes: Vec<usize>,
    local_index: Vec<Option<usize>>,
}

#[derive(Serialize, Deserialize)]
struct SubsetRepr {
    expert: Fold,
    class_count: usize,
    classes: Vec<usize>,
}

impl TryFrom<SubsetRepr> for SubsetSpec {
    type Error = Error;

    fn try_from(repr: SubsetRepr) -> Result<Self> {
        SubsetSpec::new(repr.expert, repr.class_count, repr.classes)
    }
}

impl From<SubsetSpec> for SubsetRepr {
    fn from(spec: SubsetSpec) -> Self {
        SubsetRepr {
            expert: spec.expert,
            class_count: spec.class_count,
            classes: spec.classes,
        }
    }
}

impl SubsetSpec {
    /// `classes` lists global class indices in local order.
    pub fn new(expert: Fold, class_count: usize, classes: Vec<usize>) -> Result<Self> {
        if classes.is_empty() {
            return Err(Error::EmptyFold(expert));
        }
        let mut local_index = vec![None; class_count];
        for (local, &class) in classes.iter().enumerate() {
            if class >= class_count {
                return Err(Error::config(format!(
                    "subset class {class} outside [0, {class_count})"
                )));
            }
            if local_index[class].replace(local).is_some() {
                return Err(Error::config(format!("class {class} listed twice in subset")));
            }
        }
        Ok(Self {
            expert,
            class_count,
            classes,
            local_index,
        })
    }

    pub fn expert(&self) -> Fold {
        self.expert
    }

    pub fn classes(&self) -> &[usize] {
        &self.classes
    }

    /// Number of classes C of the whole problem.
    pub fn class_count(&self) -> usize {
        self.class_count
    }

    /// Number of in-subset classes k.
    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    /// Width of the expert head: k in-subset outputs plus the reject output.
    pub fn head_width(&self) -> usize {
        self.classes.len() + 1
    }

    /// Local index of the reject output (always last).
    pub fn reject_index(&self) -> usize {
        self.classes.len()
    }

    pub fn local(&self, class: usize) -> Option<usize> {
        self.local_index.get(class).copied().flatten()
    }

    pub fn contains(&self, class: usize) -> bool {
        self.local(class).is_some()
    }

    pub fn global(&self, local: usize) -> usize {
        self.classes[local]
    }
}

/// Classes ordered by descending frequency, ties by ascending index.
pub fn frequency_order(frequencies: &[usize]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..frequencies.len()).collect();
    order.sort_by(|&a, &b| frequencies[b].cmp(&frequencies[a]).then(a.cmp(&b)));
    order
}

/// Splits the frequency-sorted classes into the three expert subsets.
pub fn partition_subsets(
    assignment: &FoldAssignment,
    train: &EmbeddingDataset,
) -> Result<[SubsetSpec; 3]> {
    let frequencies = train.class_frequency();
    if frequencies.len() != assignment.class_count() {
        return Err(Error::config(format!(
            "fold assignment covers {} classes, dataset has {}",
            assignment.class_count(),
            frequencies.len()
        )));
    }
    let order = frequency_order(frequencies);
    let mut groups: [Vec<usize>; 3] = Default::default();
    for class in order {
        groups[assignment.fold(class).index()].push(class);
    }
    let class_count = frequencies.len();
    let [many, medium, few] = groups;
    Ok([
        SubsetSpec::new(Fold::Manyshot, class_count, many)?,
        SubsetSpec::new(Fold::Mediumshot, class_count, medium)?,
        SubsetSpec::new(Fold::Fewshot, class_count, few)?,
    ])
}

/// Relabels a split for one expert: in-subset classes get their local index,
/// everything else the reject label `k`.
pub fn relabel_for_expert(data: &EmbeddingDataset, subset: &SubsetSpec) -> Result<EmbeddingDataset> {
    if subset.class_count() != data.class_count() {
        return Err(Error::config(format!(
            "subset is defined over {} classes, dataset has {}",
            subset.class_count(),
            data.class_count()
        )));
    }
    let reject = subset.reject_index();
    let labels = data
        .labels()
        .iter()
        .map(|&label| subset.local(label).unwrap_or(reject))
        .collect();
    data.with_labels(subset.head_width(), labels)
}
