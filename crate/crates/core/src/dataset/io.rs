//! CSV embedding files and bundle manifests.
//!
//! An embedding file has the header `label,f0,f1,...,f{d-1}` followed by one
//! sample per row. The manifest is a small TOML file naming the three split
//! files (relative paths resolve against the manifest's directory).

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{DatasetBundle, EmbeddingDataset};
use crate::error::{Error, Result};
use crate::fsutil::write_atomic;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BundleManifest {
    /// Number of classes; inferred from the largest label when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub classes: Option<usize>,
    pub train: PathBuf,
    pub val: PathBuf,
    pub test: PathBuf,
}

/// A val or test split whose classes are not equally represented.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BalanceWarning {
    pub split: String,
    pub class_counts: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct LoadedBundle {
    pub bundle: DatasetBundle,
    pub warnings: Vec<BalanceWarning>,
}

/// Raw contents of one embedding file.
#[derive(Debug, Clone)]
pub struct EmbeddingRows {
    pub dim: usize,
    pub features: Vec<f64>,
    pub labels: Vec<usize>,
}

pub fn read_embedding_csv(path: &Path) -> Result<EmbeddingRows> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .quoting(false)
        .from_path(path)?;
    let header = reader.headers()?.clone();
    if header.get(0) != Some("label") || header.len() < 2 {
        return Err(Error::parse(1, "header must start with `label` followed by f0..f{d-1}"));
    }
    for (i, name) in header.iter().skip(1).enumerate() {
        if name != format!("f{i}") {
            return Err(Error::parse(1, format!("expected column `f{i}`, found `{name}`")));
        }
    }
    let dim = header.len() - 1;
    let mut features = Vec::new();
    let mut labels = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let record = record?;
        let line = i + 2;
        if record.len() != dim + 1 {
            return Err(Error::DimensionMismatch {
                row: line,
                expected: dim,
                found: record.len().saturating_sub(1),
            });
        }
        let label = record[0]
            .trim()
            .parse::<usize>()
            .map_err(|e| Error::parse(line, format!("label `{}`: {e}", &record[0])))?;
        labels.push(label);
        for field in record.iter().skip(1) {
            let value = field
                .trim()
                .parse::<f64>()
                .map_err(|e| Error::parse(line, format!("value `{field}`: {e}")))?;
            features.push(value);
        }
    }
    Ok(EmbeddingRows {
        dim,
        features,
        labels,
    })
}

pub fn write_embedding_csv(path: &Path, data: &EmbeddingDataset) -> Result<()> {
    let mut out = String::with_capacity(data.len() * (data.dim() + 1) * 12);
    out.push_str("label");
    for i in 0..data.dim() {
        out.push_str(&format!(",f{i}"));
    }
    out.push('\n');
    for (feature, label) in data.iter() {
        out.push_str(&label.to_string());
        for v in feature {
            out.push(',');
            out.push_str(&v.to_string());
        }
        out.push('\n');
    }
    write_atomic(path, out.as_bytes())
}

fn into_dataset(rows: EmbeddingRows, class_count: usize) -> Result<EmbeddingDataset> {
    for (i, &label) in rows.labels.iter().enumerate() {
        if label >= class_count {
            return Err(Error::LabelOutOfRange {
                row: i + 2,
                label,
                class_count,
            });
        }
    }
    EmbeddingDataset::new(rows.dim, class_count, rows.features, rows.labels)
}

/// Loads three split files. Class frequencies are always recomputed from the
/// rows; unbalanced val/test splits are reported as warnings.
pub fn load_bundle_files(
    class_count: Option<usize>,
    train: &Path,
    val: &Path,
    test: &Path,
) -> Result<LoadedBundle> {
    let splits = [
        read_embedding_csv(train)?,
        read_embedding_csv(val)?,
        read_embedding_csv(test)?,
    ];
    let dim = splits[0].dim;
    if let Some(split) = splits.iter().find(|s| s.dim != dim) {
        return Err(Error::config(format!(
            "split dimensions differ: train has {dim}, another split has {}",
            split.dim
        )));
    }
    let class_count = match class_count {
        Some(c) => c,
        None => {
            splits
                .iter()
                .flat_map(|s| s.labels.iter().copied())
                .max()
                .ok_or_else(|| Error::config("embedding files contain no samples"))?
                + 1
        }
    };
    let [train, val, test] = splits;
    let bundle = DatasetBundle::new(
        into_dataset(train, class_count)?,
        into_dataset(val, class_count)?,
        into_dataset(test, class_count)?,
    )?;
    let mut warnings = Vec::new();
    for (name, split) in [("val", &bundle.val), ("test", &bundle.test)] {
        if !split.is_balanced() {
            log::warn!("{name} split is not class-balanced");
            warnings.push(BalanceWarning {
                split: name.to_string(),
                class_counts: split.class_frequency().to_vec(),
            });
        }
    }
    Ok(LoadedBundle { bundle, warnings })
}

/// Loads the bundle described by a manifest file.
pub fn load_embeddings(manifest_path: &Path) -> Result<LoadedBundle> {
    let text = fs::read_to_string(manifest_path)?;
    let manifest: BundleManifest =
        toml::from_str(&text).map_err(|e| Error::config(format!("manifest: {e}")))?;
    let base = manifest_path.parent().unwrap_or(Path::new("."));
    load_bundle_files(
        manifest.classes,
        &base.join(&manifest.train),
        &base.join(&manifest.val),
        &base.join(&manifest.test),
    )
}

/// Writes `train.csv`, `val.csv`, `test.csv` and `manifest.toml` into `dir`
/// and returns the manifest path.
pub fn write_bundle(dir: &Path, bundle: &DatasetBundle) -> Result<PathBuf> {
    fs::create_dir_all(dir)?;
    write_embedding_csv(&dir.join("train.csv"), &bundle.train)?;
    write_embedding_csv(&dir.join("val.csv"), &bundle.val)?;
    write_embedding_csv(&dir.join("test.csv"), &bundle.test)?;
    let manifest = BundleManifest {
        classes: Some(bundle.class_count()),
        train: "train.csv".into(),
        val: "val.csv".into(),
        test: "test.csv".into(),
    };
    let path = dir.join("manifest.toml");
    let text = toml::to_string(&manifest).map_err(|e| Error::config(e.to_string()))?;
    write_atomic(&path, text.as_bytes())?;
    Ok(path)
}
