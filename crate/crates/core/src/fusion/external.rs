//! Posterior dump files and externally produced model posteriors.
//!
//! Full posteriors: `sample_id,p0,...,p{C-1}`. Partial posteriors of one
//! expert: `sample_id,expert_id,p0,...,p{k-1},preject`. Every dump has a JSON
//! sidecar at `<file>.json` describing the model and, for partials, its subset.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{
    fuse_calibrated, fuse_soft_vote, CalibrationParams, EnsembleOutputs, FullPosterior,
    MemberOutputs, PosteriorLayout,
};
use crate::dataset::{Fold, SubsetSpec};
use crate::error::{Error, Result};
use crate::fsutil::write_atomic;
use crate::network::PROB_FLOOR;

const SIDECAR_FORMAT: &str = "cbexperts.posteriors";
const SIDECAR_VERSION: u32 = 1;
const ROW_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PosteriorSidecar {
    pub format: String,
    pub version: u32,
    pub model: String,
    pub class_count: usize,
    /// Present for partial dumps.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub subset: Option<SubsetSpec>,
}

fn sidecar_path(path: &Path) -> PathBuf {
    let mut name = path.as_os_str().to_owned();
    name.push(".json");
    PathBuf::from(name)
}

fn write_sidecar(path: &Path, sidecar: &PosteriorSidecar) -> Result<()> {
    let mut text = serde_json::to_string_pretty(sidecar)?;
    text.push('\n');
    write_atomic(&sidecar_path(path), text.as_bytes())
}

fn read_sidecar(path: &Path) -> Result<Option<PosteriorSidecar>> {
    let side = sidecar_path(path);
    if !side.exists() {
        return Ok(None);
    }
    let sidecar: PosteriorSidecar = serde_json::from_str(&std::fs::read_to_string(side)?)?;
    if sidecar.format != SIDECAR_FORMAT || sidecar.version != SIDECAR_VERSION {
        return Err(Error::config(format!(
            "unsupported posterior sidecar {} v{}",
            sidecar.format, sidecar.version
        )));
    }
    Ok(Some(sidecar))
}

fn push_row(out: &mut String, values: &[f64]) {
    for v in values {
        out.push(',');
        out.push_str(&v.to_string());
    }
    out.push('\n');
}

/// Writes full posteriors (one row per sample) plus sidecar.
pub fn write_full_posteriors(
    path: &Path,
    model: &str,
    sample_ids: &[u64],
    rows: &[FullPosterior],
) -> Result<()> {
    let class_count = rows.first().map_or(0, FullPosterior::len);
    let mut out = String::from("sample_id");
    for c in 0..class_count {
        out.push_str(&format!(",p{c}"));
    }
    out.push('\n');
    for (id, row) in sample_ids.iter().zip(rows) {
        out.push_str(&id.to_string());
        push_row(&mut out, row.probabilities());
    }
    write_atomic(path, out.as_bytes())?;
    write_sidecar(
        path,
        &PosteriorSidecar {
            format: SIDECAR_FORMAT.into(),
            version: SIDECAR_VERSION,
            model: model.into(),
            class_count,
            subset: None,
        },
    )
}

/// Writes one expert's partial posteriors plus sidecar.
pub fn write_partial_posteriors(
    path: &Path,
    model: &str,
    subset: &SubsetSpec,
    sample_ids: &[u64],
    rows: &[Vec<f64>],
) -> Result<()> {
    let mut out = String::from("sample_id,expert_id");
    for j in 0..subset.len() {
        out.push_str(&format!(",p{j}"));
    }
    out.push_str(",preject\n");
    for (id, row) in sample_ids.iter().zip(rows) {
        if row.len() != subset.head_width() {
            return Err(Error::config("partial posterior width does not match the subset"));
        }
        out.push_str(&format!("{id},{}", subset.expert().as_str()));
        push_row(&mut out, row);
    }
    write_atomic(path, out.as_bytes())?;
    write_sidecar(
        path,
        &PosteriorSidecar {
            format: SIDECAR_FORMAT.into(),
            version: SIDECAR_VERSION,
            model: model.into(),
            class_count: subset.class_count(),
            subset: Some(subset.clone()),
        },
    )
}

fn csv_reader(path: &Path) -> Result<csv::Reader<std::fs::File>> {
    Ok(csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .quoting(false)
        .from_path(path)?)
}

fn parse_values<'a>(fields: impl Iterator<Item = &'a str>, line: usize) -> Result<Vec<f64>> {
    fields
        .map(|f| {
            f.trim()
                .parse::<f64>()
                .map_err(|e| Error::parse(line, format!("value `{f}`: {e}")))
        })
        .collect()
}

fn parse_id(field: &str, line: usize) -> Result<u64> {
    field
        .trim()
        .parse::<u64>()
        .map_err(|e| Error::parse(line, format!("sample_id `{field}`: {e}")))
}

/// Reads a partial dump written by [`write_partial_posteriors`]; the sidecar
/// is required because it carries the subset.
pub fn read_partial_posteriors(path: &Path) -> Result<(PosteriorSidecar, Vec<u64>, Vec<Vec<f64>>)> {
    let sidecar = read_sidecar(path)?
        .ok_or_else(|| Error::config(format!("{} has no sidecar", path.display())))?;
    let subset = sidecar
        .subset
        .clone()
        .ok_or_else(|| Error::config("sidecar of a partial dump must name its subset"))?;
    let mut reader = csv_reader(path)?;
    let expected = subset.head_width() + 2;
    if reader.headers()?.len() != expected {
        return Err(Error::parse(1, format!("expected {expected} columns")));
    }
    let mut ids = Vec::new();
    let mut rows = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let record = record?;
        let line = i + 2;
        if record.len() != expected {
            return Err(Error::DimensionMismatch {
                row: line,
                expected: expected - 2,
                found: record.len().saturating_sub(2),
            });
        }
        if record[1].parse::<Fold>()? != subset.expert() {
            return Err(Error::parse(line, "expert_id does not match the sidecar subset"));
        }
        ids.push(parse_id(&record[0], line)?);
        rows.push(parse_values(record.iter().skip(2), line)?);
    }
    Ok((sidecar, ids, rows))
}

/// Full posteriors of one model keyed by sample id.
#[derive(Debug, Clone, PartialEq)]
pub struct ExternalPosteriorTable {
    pub name: String,
    pub class_count: usize,
    pub sample_ids: Vec<u64>,
    pub rows: Vec<Vec<f64>>,
    /// Rows whose mass was off by more than 1e-6 and got renormalised.
    pub renormalized_rows: usize,
}

impl ExternalPosteriorTable {
    /// Validates rows, renormalising any whose mass is off by more than 1e-6.
    pub fn new(name: String, class_count: usize, sample_ids: Vec<u64>, rows: Vec<Vec<f64>>) -> Result<Self> {
        if sample_ids.len() != rows.len() {
            return Err(Error::config("one sample id per posterior row is required"));
        }
        let mut seen = std::collections::HashSet::new();
        if let Some(dup) = sample_ids.iter().find(|id| !seen.insert(**id)) {
            return Err(Error::KeyMismatch(format!("sample {dup} appears twice in `{name}`")));
        }
        let mut renormalized_rows = 0;
        let mut clean = Vec::with_capacity(rows.len());
        for (i, row) in rows.into_iter().enumerate() {
            if row.len() != class_count {
                return Err(Error::DimensionMismatch {
                    row: i + 2,
                    expected: class_count,
                    found: row.len(),
                });
            }
            let total: f64 = row.iter().sum();
            if (total - 1.0).abs() > ROW_TOLERANCE {
                renormalized_rows += 1;
                clean.push(FullPosterior::normalized(row)?.into_vec());
            } else {
                clean.push(FullPosterior::new(row, ROW_TOLERANCE)?.into_vec());
            }
        }
        if renormalized_rows > 0 {
            log::warn!("renormalised {renormalized_rows} rows of posterior table `{name}`");
        }
        Ok(Self {
            name,
            class_count,
            sample_ids,
            rows: clean,
            renormalized_rows,
        })
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }
}

/// Reads a full-posterior dump with `class_count` probability columns.
pub fn ingest_external_posteriors(path: &Path, class_count: usize) -> Result<ExternalPosteriorTable> {
    let sidecar = read_sidecar(path)?;
    let name = sidecar
        .as_ref()
        .map(|s| s.model.clone())
        .or_else(|| path.file_stem().map(|s| s.to_string_lossy().into_owned()))
        .unwrap_or_else(|| "external".into());
    let mut reader = csv_reader(path)?;
    let header = reader.headers()?.clone();
    if header.get(0) != Some("sample_id") || header.len() != class_count + 1 {
        return Err(Error::parse(
            1,
            format!("expected `sample_id` and {class_count} probability columns"),
        ));
    }
    let mut ids = Vec::new();
    let mut rows = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let record = record?;
        let line = i + 2;
        if record.len() != class_count + 1 {
            return Err(Error::DimensionMismatch {
                row: line,
                expected: class_count,
                found: record.len().saturating_sub(1),
            });
        }
        ids.push(parse_id(&record[0], line)?);
        rows.push(parse_values(record.iter().skip(1), line)?);
    }
    ExternalPosteriorTable::new(name, class_count, ids, rows)
}

/// Aligns tables by sample id (order of the first table) as full-width
/// ensemble members whose logits are the log-probabilities.
pub fn tables_to_outputs(tables: &[ExternalPosteriorTable]) -> Result<(Vec<u64>, EnsembleOutputs)> {
    let first = tables
        .first()
        .ok_or_else(|| Error::config("at least one posterior table is required"))?;
    let ids = first.sample_ids.clone();
    let mut members = Vec::with_capacity(tables.len());
    for table in tables {
        if table.class_count != first.class_count {
            return Err(Error::config(format!(
                "table `{}` has {} classes, `{}` has {}",
                table.name, table.class_count, first.name, first.class_count
            )));
        }
        if table.len() != ids.len() {
            return Err(Error::KeyMismatch(format!(
                "`{}` has {} samples, `{}` has {}",
                table.name,
                table.len(),
                first.name,
                ids.len()
            )));
        }
        let position: HashMap<u64, usize> = table
            .sample_ids
            .iter()
            .enumerate()
            .map(|(i, &id)| (id, i))
            .collect();
        let mut probabilities = Vec::with_capacity(ids.len());
        for id in &ids {
            let &row = position.get(id).ok_or_else(|| {
                Error::KeyMismatch(format!("sample {id} missing from `{}`", table.name))
            })?;
            probabilities.push(table.rows[row].clone());
        }
        let logits = probabilities
            .iter()
            .map(|row: &Vec<f64>| row.iter().map(|p| p.max(PROB_FLOOR).ln()).collect())
            .collect();
        members.push(MemberOutputs {
            name: table.name.clone(),
            layout: PosteriorLayout::full(table.class_count),
            logits,
            probabilities,
        });
    }
    Ok((ids, EnsembleOutputs::new(members)?))
}

/// How [`fuse_models`] combines full-width models.
#[derive(Debug, Clone, Copy)]
pub enum ModelFusion<'a> {
    SoftVote,
    Calibrated(&'a CalibrationParams),
}

/// Fuses external models sample by sample.
pub fn fuse_models(
    tables: &[ExternalPosteriorTable],
    strategy: ModelFusion<'_>,
) -> Result<Vec<(u64, FullPosterior)>> {
    let (ids, outputs) = tables_to_outputs(tables)?;
    let layouts = outputs.layouts();
    ids.into_iter()
        .enumerate()
        .map(|(i, id)| {
            let q = match strategy {
                ModelFusion::SoftVote => fuse_soft_vote(&outputs.sample_probabilities(i), &layouts)?,
                ModelFusion::Calibrated(params) => {
                    fuse_calibrated(&outputs.sample_logits(i), params, &layouts)?
                }
            };
            Ok((id, q))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn table(name: &str, ids: Vec<u64>, rows: Vec<Vec<f64>>) -> ExternalPosteriorTable {
        ExternalPosteriorTable::new(name.into(), rows[0].len(), ids, rows).unwrap()
    }

    #[test]
    fn single_model_ensemble_returns_its_rows() {
        let t = table("a", vec![3, 1], vec![vec![0.2, 0.8], vec![0.6, 0.4]]);
        let fused = fuse_models(&[t], ModelFusion::SoftVote).unwrap();
        assert_eq!(fused[0].0, 3);
        assert_eq!(fused[0].1.probabilities(), &[0.2, 0.8]);
        assert_eq!(fused[1].1.probabilities(), &[0.6, 0.4]);
    }

    #[test]
    fn tables_align_by_key() {
        let a = table("a", vec![1, 2], vec![vec![1.0, 0.0], vec![0.0, 1.0]]);
        let b = table("b", vec![2, 1], vec![vec![0.5, 0.5], vec![0.0, 1.0]]);
        let fused = fuse_models(&[a, b], ModelFusion::SoftVote).unwrap();
        assert_eq!(fused[0].1.probabilities(), &[0.5, 0.5]);
        assert_eq!(fused[1].1.probabilities(), &[0.25, 0.75]);
    }

    #[test]
    fn key_mismatch_is_reported() {
        let a = table("a", vec![1, 2], vec![vec![1.0, 0.0], vec![0.0, 1.0]]);
        let b = table("b", vec![1, 3], vec![vec![0.5, 0.5], vec![0.0, 1.0]]);
        assert!(matches!(
            fuse_models(&[a, b], ModelFusion::SoftVote),
            Err(Error::KeyMismatch(_))
        ));
    }

    #[test]
    fn off_mass_rows_are_renormalised() {
        let t = ExternalPosteriorTable::new("a".into(), 2, vec![0, 1], vec![vec![0.5, 0.5], vec![1.0, 1.0]])
            .unwrap();
        assert_eq!(t.renormalized_rows, 1);
        assert_eq!(t.rows[1], vec![0.5, 0.5]);
    }

    #[test]
    fn calibrated_identity_matches_soft_vote() {
        let a = table("a", vec![0, 1], vec![vec![0.7, 0.2, 0.1], vec![0.1, 0.1, 0.8]]);
        let b = table("b", vec![0, 1], vec![vec![0.3, 0.3, 0.4], vec![0.25, 0.5, 0.25]]);
        let tables = [a, b];
        let (_, outputs) = tables_to_outputs(&tables).unwrap();
        let identity = CalibrationParams::identity(&outputs.layouts());
        let soft = fuse_models(&tables, ModelFusion::SoftVote).unwrap();
        let cal = fuse_models(&tables, ModelFusion::Calibrated(&identity)).unwrap();
        for ((_, x), (_, y)) in soft.iter().zip(&cal) {
            for (p, q) in x.probabilities().iter().zip(y.probabilities()) {
                assert!((p - q).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn dump_files_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let full = dir.path().join("base.csv");
        let rows = vec![
            FullPosterior::new(vec![0.1, 0.2, 0.7], 1e-12).unwrap(),
            FullPosterior::new(vec![1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0], 1e-12).unwrap(),
        ];
        write_full_posteriors(&full, "baseline", &[10, 11], &rows).unwrap();
        let t = ingest_external_posteriors(&full, 3).unwrap();
        assert_eq!(t.name, "baseline");
        assert_eq!(t.sample_ids, vec![10, 11]);
        assert_eq!(t.rows[1], rows[1].probabilities());
        assert!(ingest_external_posteriors(&full, 4).is_err());

        let partial = dir.path().join("few.csv");
        let subset = SubsetSpec::new(Fold::Fewshot, 3, vec![2]).unwrap();
        write_partial_posteriors(&partial, "expert-fewshot", &subset, &[10, 11], &[vec![0.4, 0.6], vec![0.9, 0.1]])
            .unwrap();
        let text = std::fs::read_to_string(&partial).unwrap();
        assert!(text.starts_with("sample_id,expert_id,p0,preject\n10,fewshot,0.4,0.6\n"));
        let (side, ids, back) = read_partial_posteriors(&partial).unwrap();
        assert_eq!(side.subset.unwrap(), subset);
        assert_eq!(ids, vec![10, 11]);
        assert_eq!(back[1], vec![0.9, 0.1]);
    }
}
