//! Four-fold accuracy, Oracle routing, expert collision, confidence
//! histograms and take-one-out ablations.

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{EmbeddingDataset, Fold, FoldAssignment};
use crate::error::{Error, Result};
use crate::experts::{expert_outputs, ExpertModel};
use crate::fusion::{
    expand_partial, fuse_models, tables_to_outputs, train_joint_calibration, CalibrationOptions,
    EnsembleOutputs, ExternalPosteriorTable, FullPosterior, MemberOutputs, ModelFusion,
};
use crate::network::argmax;

/// Accuracy per fold and overall; `None` marks a fold without samples.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FourFold<T> {
    pub manyshot: T,
    pub mediumshot: T,
    pub fewshot: T,
    pub all: T,
}

impl<T: Copy> FourFold<T> {
    pub fn fold(&self, fold: Fold) -> T {
        match fold {
            Fold::Manyshot => self.manyshot,
            Fold::Mediumshot => self.mediumshot,
            Fold::Fewshot => self.fewshot,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub accuracy: FourFold<Option<f64>>,
    pub counts: FourFold<usize>,
    pub correct: FourFold<usize>,
    /// `None` for classes without test samples.
    pub per_class_accuracy: Vec<Option<f64>>,
}

fn ratio(hit: usize, total: usize) -> Option<f64> {
    (total > 0).then(|| hit as f64 / total as f64)
}

impl EvalReport {
    pub fn all(&self) -> f64 {
        self.accuracy.all.unwrap_or(f64::NAN)
    }

    /// Fold accuracy, NaN when the fold is empty.
    pub fn fold(&self, fold: Fold) -> f64 {
        self.accuracy.fold(fold).unwrap_or(f64::NAN)
    }

    /// Aligned text table, percentages with one decimal.
    pub fn to_text(&self, title: &str) -> String {
        let cell = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |a| format!("{:.1}", 100.0 * a));
        let mut out = String::new();
        let _ = writeln!(out, "{:<24} {:>9} {:>10} {:>8} {:>6}", "model", "Manyshot", "Mediumshot", "Fewshot", "All");
        let a = &self.accuracy;
        let _ = writeln!(
            out,
            "{:<24} {:>9} {:>10} {:>8} {:>6}",
            title,
            cell(a.manyshot),
            cell(a.mediumshot),
            cell(a.fewshot),
            cell(a.all)
        );
        out
    }
}

/// Top-1 accuracy per fold and overall.
pub fn fourfold_accuracy(predictions: &[usize], labels: &[usize], folds: &FoldAssignment) -> Result<EvalReport> {
    if predictions.len() != labels.len() {
        return Err(Error::config(format!(
            "{} predictions for {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    let classes = folds.class_count();
    let mut class_hits = vec![0usize; classes];
    let mut class_totals = vec![0usize; classes];
    for (&p, &y) in predictions.iter().zip(labels) {
        if y >= classes {
            return Err(Error::LabelOutOfRange {
                row: 0,
                label: y,
                class_count: classes,
            });
        }
        class_totals[y] += 1;
        class_hits[y] += usize::from(p == y);
    }
    let mut hits = [0usize; 3];
    let mut totals = [0usize; 3];
    for c in 0..classes {
        let f = folds.fold(c).index();
        hits[f] += class_hits[c];
        totals[f] += class_totals[c];
    }
    let all_hit: usize = hits.iter().sum();
    let all_total: usize = totals.iter().sum();
    Ok(EvalReport {
        accuracy: FourFold {
            manyshot: ratio(hits[0], totals[0]),
            mediumshot: ratio(hits[1], totals[1]),
            fewshot: ratio(hits[2], totals[2]),
            all: ratio(all_hit, all_total),
        },
        counts: FourFold {
            manyshot: totals[0],
            mediumshot: totals[1],
            fewshot: totals[2],
            all: all_total,
        },
        correct: FourFold {
            manyshot: hits[0],
            mediumshot: hits[1],
            fewshot: hits[2],
            all: all_hit,
        },
        per_class_accuracy: class_hits
            .iter()
            .zip(&class_totals)
            .map(|(&h, &t)| ratio(h, t))
            .collect(),
    })
}

pub fn argmax_predictions(posteriors: &[FullPosterior]) -> Vec<usize> {
    posteriors.iter().map(FullPosterior::argmax).collect()
}

/// Routes each sample to the member owning its true class and predicts over
/// that member's own classes only.
pub fn oracle_from_outputs(outputs: &EnsembleOutputs, labels: &[usize], folds: &FoldAssignment) -> Result<EvalReport> {
    if labels.len() != outputs.len() {
        return Err(Error::config("one label per sample is required"));
    }
    let predictions = labels
        .iter()
        .enumerate()
        .map(|(i, &y)| {
            let owner = outputs
                .owner_of(y)
                .ok_or_else(|| Error::config(format!("no expert covers class {y}")))?;
            let member = &outputs.members()[owner];
            let classes = member.layout.classes();
            let local = argmax(&member.probabilities[i][..classes.len()]);
            Ok(classes[local])
        })
        .collect::<Result<Vec<_>>>()?;
    fourfold_accuracy(&predictions, labels, folds)
}

pub fn oracle_evaluate(experts: &[ExpertModel], test: &EmbeddingDataset, folds: &FoldAssignment) -> Result<EvalReport> {
    let members = experts
        .iter()
        .map(|e| expert_outputs(e, test))
        .collect::<Result<Vec<_>>>()?;
    oracle_from_outputs(&EnsembleOutputs::new(members)?, test.labels(), folds)
}

/// Rows: true fold of the sample. Columns: ensemble member that owns the
/// argmax of the fused posterior.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpertConfusionMatrix {
    pub experts: Vec<String>,
    pub counts: Vec<Vec<usize>>,
    /// Row-normalised percentages; rows without samples are all zero.
    pub percent: Vec<Vec<f64>>,
}

impl ExpertConfusionMatrix {
    /// Mean of the diagonal percentages over rows that have samples.
    /// Requires one member per fold, in fold order.
    pub fn diagonal_mass(&self) -> Result<f64> {
        if self.experts.len() != 3 {
            return Err(Error::config("diagonal mass needs exactly the three fold experts"));
        }
        let rows: Vec<f64> = (0..3)
            .filter(|&r| self.counts[r].iter().sum::<usize>() > 0)
            .map(|r| self.percent[r][r])
            .collect();
        if rows.is_empty() {
            return Err(Error::config("confusion matrix has no samples"));
        }
        Ok(rows.iter().sum::<f64>() / rows.len() as f64)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("fold");
        for e in &self.experts {
            out.push(',');
            out.push_str(e);
        }
        out.push('\n');
        for (fold, row) in Fold::ALL.iter().zip(&self.percent) {
            out.push_str(fold.as_str());
            for v in row {
                let _ = write!(out, ",{v:.4}");
            }
            out.push('\n');
        }
        out
    }
}

pub fn expert_confusion_matrix(
    outputs: &EnsembleOutputs,
    fused: &[FullPosterior],
    labels: &[usize],
    folds: &FoldAssignment,
) -> Result<ExpertConfusionMatrix> {
    if fused.len() != labels.len() || labels.len() != outputs.len() {
        return Err(Error::config("fused posteriors, labels and outputs must align"));
    }
    let m = outputs.members().len();
    let mut counts = vec![vec![0usize; m]; 3];
    for (q, &y) in fused.iter().zip(labels) {
        let winner = q.argmax();
        let col = outputs
            .owner_of(winner)
            .ok_or_else(|| Error::config(format!("no member covers class {winner}")))?;
        counts[folds.fold(y).index()][col] += 1;
    }
    let percent = counts
        .iter()
        .map(|row| {
            let total: usize = row.iter().sum();
            row.iter()
                .map(|&c| if total == 0 { 0.0 } else { 100.0 * c as f64 / total as f64 })
                .collect()
        })
        .collect();
    Ok(ExpertConfusionMatrix {
        experts: outputs.members().iter().map(|m| m.name.clone()).collect(),
        counts,
        percent,
    })
}

/// Which posterior the maximum is taken over.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum MspSource {
    /// The expert's posterior expanded to all classes.
    #[default]
    Expanded,
    /// The expert's raw `k+1` outputs.
    Partial,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfidenceHistogram {
    pub expert: String,
    pub population: String,
    pub source: MspSource,
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
    pub mean: Option<f64>,
}

impl ConfidenceHistogram {
    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }
}

fn msp(member: &MemberOutputs, i: usize, source: MspSource) -> Result<f64> {
    let row = &member.probabilities[i];
    let values = match source {
        MspSource::Partial => row.clone(),
        MspSource::Expanded => expand_partial(row, &member.layout)?.posterior,
    };
    Ok(values.into_iter().fold(f64::NEG_INFINITY, f64::max))
}

/// Histogram of maximum softmax probabilities over `samples` in `bins`
/// equal-width bins on [0, 1].
pub fn msp_histogram(
    member: &MemberOutputs,
    samples: &[usize],
    bins: usize,
    source: MspSource,
    population: &str,
) -> Result<ConfidenceHistogram> {
    if bins == 0 {
        return Err(Error::config("a histogram needs at least one bin"));
    }
    let mut counts = vec![0usize; bins];
    let mut sum = 0.0;
    for &i in samples {
        let m = msp(member, i, source)?;
        counts[((m * bins as f64) as usize).min(bins - 1)] += 1;
        sum += m;
    }
    Ok(ConfidenceHistogram {
        expert: member.name.clone(),
        population: population.to_string(),
        source,
        edges: (0..=bins).map(|b| b as f64 / bins as f64).collect(),
        counts,
        mean: (!samples.is_empty()).then(|| sum / samples.len() as f64),
    })
}

pub fn histograms_to_csv(histograms: &[ConfidenceHistogram]) -> String {
    let mut out = String::from("expert,population,source,bin_low,bin_high,count\n");
    for h in histograms {
        let source = match h.source {
            MspSource::Expanded => "expanded",
            MspSource::Partial => "partial",
        };
        for (b, c) in h.counts.iter().enumerate() {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{}",
                h.expert,
                h.population,
                source,
                h.edges[b],
                h.edges[b + 1],
                c
            );
        }
    }
    out
}

/// How the models of an ablation are combined.
#[derive(Debug, Clone, Copy)]
pub enum AblationFusion<'a> {
    SoftVote,
    /// Joint calibration refitted on validation tables for every subset.
    Calibrated {
        val: &'a [ExternalPosteriorTable],
        val_labels: &'a [usize],
        options: &'a CalibrationOptions,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    /// `None` for the full ensemble.
    pub removed: Option<String>,
    pub models: Vec<String>,
    pub report: EvalReport,
}

/// Evaluates the full ensemble and every leave-one-out subset.
pub fn take_one_out_ablation(
    models: &[ExternalPosteriorTable],
    labels_by_id: &(dyn Fn(u64) -> Option<usize> + Sync),
    folds: &FoldAssignment,
    fusion: AblationFusion<'_>,
) -> Result<Vec<AblationRow>> {
    if models.len() < 2 {
        return Err(Error::config("an ablation needs at least two models"));
    }
    let subsets: Vec<(Option<String>, Vec<usize>)> = std::iter::once((None, (0..models.len()).collect()))
        .chain((0..models.len()).map(|r| {
            (
                Some(models[r].name.clone()),
                (0..models.len()).filter(|&i| i != r).collect(),
            )
        }))
        .collect();
    subsets
        .into_par_iter()
        .map(|(removed, keep)| {
            let tables: Vec<ExternalPosteriorTable> = keep.iter().map(|&i| models[i].clone()).collect();
            let fused = match fusion {
                AblationFusion::SoftVote => fuse_models(&tables, ModelFusion::SoftVote)?,
                AblationFusion::Calibrated {
                    val,
                    val_labels,
                    options,
                } => {
                    let val_tables: Vec<ExternalPosteriorTable> = keep.iter().map(|&i| val[i].clone()).collect();
                    let (_, val_outputs) = tables_to_outputs(&val_tables)?;
                    let params = train_joint_calibration(&val_outputs, val_labels, options)?.params;
                    fuse_models(&tables, ModelFusion::Calibrated(&params))?
                }
            };
            let mut predictions = Vec::with_capacity(fused.len());
            let mut labels = Vec::with_capacity(fused.len());
            for (id, q) in &fused {
                let y = labels_by_id(*id).ok_or_else(|| Error::KeyMismatch(format!("no label for sample {id}")))?;
                predictions.push(q.argmax());
                labels.push(y);
            }
            Ok(AblationRow {
                removed,
                models: tables.iter().map(|t| t.name.clone()).collect(),
                report: fourfold_accuracy(&predictions, &labels, folds)?,
            })
        })
        .collect()
}

pub fn ablation_to_text(rows: &[AblationRow]) -> String {
    let mut out = String::new();
    for (i, row) in rows.iter().enumerate() {
        let title = match &row.removed {
            None => "all models".to_string(),
            Some(name) => format!("without {name}"),
        };
        let text = row.report.to_text(&title);
        let body = if i == 0 { text.as_str() } else { text.lines().nth(1).unwrap_or("") };
        out.push_str(body.trim_end());
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::FoldThresholds;
    use crate::fusion::{fuse_soft_vote, PosteriorLayout};
    use proptest::prelude::*;

    /// Classes 0,1 Manyshot; 2 Mediumshot; 3 Fewshot.
    fn folds() -> FoldAssignment {
        FoldAssignment::from_frequencies(&[150, 100, 50, 5], FoldThresholds::default()).unwrap()
    }

    fn member(name: &str, classes: &[usize], reject: bool, rows: Vec<Vec<f64>>) -> MemberOutputs {
        let layout = PosteriorLayout::new(4, classes.to_vec(), reject).unwrap();
        MemberOutputs {
            name: name.into(),
            layout,
            logits: rows.iter().map(|r| r.iter().map(|p: &f64| p.ln()).collect()).collect(),
            probabilities: rows,
        }
    }

    #[test]
    fn perfect_predictions() {
        let labels = [0, 1, 2, 3];
        let r = fourfold_accuracy(&labels, &labels, &folds()).unwrap();
        assert_eq!(r.accuracy.all, Some(1.0));
        assert_eq!(r.accuracy.manyshot, Some(1.0));
        assert_eq!(r.accuracy.mediumshot, Some(1.0));
        assert_eq!(r.accuracy.fewshot, Some(1.0));
    }

    #[test]
    fn many_right_few_wrong() {
        let labels = [0, 1, 3, 3];
        let r = fourfold_accuracy(&[0, 1, 0, 2], &labels, &folds()).unwrap();
        assert_eq!(r.accuracy.manyshot, Some(1.0));
        assert_eq!(r.accuracy.fewshot, Some(0.0));
        assert_eq!(r.accuracy.all, Some(0.5));
        assert_eq!(r.accuracy.mediumshot, None);
    }

    #[test]
    fn empty_fold_serialises_as_null() {
        let r = fourfold_accuracy(&[0], &[0], &folds()).unwrap();
        let json = serde_json::to_value(&r).unwrap();
        assert!(json["accuracy"]["fewshot"].is_null());
        assert_eq!(json["accuracy"]["manyshot"], 1.0);
    }

    proptest! {
        #[test]
        fn folds_recombine_to_all(pairs in prop::collection::vec((0usize..4, 0usize..4), 1..200)) {
            let (pred, labels): (Vec<usize>, Vec<usize>) = pairs.into_iter().unzip();
            let r = fourfold_accuracy(&pred, &labels, &folds()).unwrap();
            let correct = pred.iter().zip(&labels).filter(|(p, y)| p == y).count();
            prop_assert_eq!(r.accuracy.all.unwrap(), correct as f64 / labels.len() as f64);
            let weighted: f64 = Fold::ALL
                .iter()
                .filter_map(|&f| r.accuracy.fold(f).map(|a| a * r.counts.fold(f) as f64))
                .sum::<f64>()
                / r.counts.all as f64;
            prop_assert!((weighted - r.accuracy.all.unwrap()).abs() < 1e-12);
        }
    }

    #[test]
    fn balanced_all_equals_mean_class_accuracy() {
        let labels = [0, 0, 1, 1, 2, 2, 3, 3];
        let pred = [0, 1, 1, 1, 0, 0, 3, 2];
        let r = fourfold_accuracy(&pred, &labels, &folds()).unwrap();
        let mean: f64 = r.per_class_accuracy.iter().map(|a| a.unwrap()).sum::<f64>() / 4.0;
        assert!((mean - r.all()).abs() < 1e-15);
    }

    #[test]
    fn oracle_ignores_reject_and_routes_by_label() {
        let many = member("manyshot", &[0, 1], true, vec![vec![0.1, 0.2, 0.7], vec![0.3, 0.2, 0.5]]);
        let rest = member("rest", &[2, 3], true, vec![vec![0.2, 0.3, 0.5], vec![0.1, 0.1, 0.8]]);
        let outputs = EnsembleOutputs::new(vec![many, rest]).unwrap();
        // sample 0 true class 1 -> many expert predicts 1; sample 1 true class 3 -> tie 0.1/0.1 goes to 2
        let r = oracle_from_outputs(&outputs, &[1, 3], &folds()).unwrap();
        assert_eq!(r.per_class_accuracy[1], Some(1.0));
        assert_eq!(r.per_class_accuracy[3], Some(0.0));
    }

    #[test]
    fn oracle_with_one_full_expert_is_plain_argmax() {
        let rows = vec![vec![0.1, 0.6, 0.2, 0.1, 0.0], vec![0.5, 0.1, 0.1, 0.1, 0.2]];
        let only = member("all", &[0, 1, 2, 3], true, rows.clone());
        let outputs = EnsembleOutputs::new(vec![only]).unwrap();
        let labels = [1, 2];
        let oracle = oracle_from_outputs(&outputs, &labels, &folds()).unwrap();
        let plain: Vec<usize> = rows.iter().map(|r| argmax(r)).collect();
        assert_eq!(oracle, fourfold_accuracy(&plain, &labels, &folds()).unwrap());
    }

    fn three_experts(confident: bool) -> (EnsembleOutputs, Vec<usize>) {
        let labels = vec![0, 1, 2, 3, 0, 3];
        let layouts = [&[0usize, 1][..], &[2], &[3]];
        let members = layouts
            .iter()
            .zip(["manyshot", "mediumshot", "fewshot"])
            .enumerate()
            .map(|(e, (classes, name))| {
                let rows = labels
                    .iter()
                    .enumerate()
                    .map(|(i, &y)| {
                        let k = classes.len();
                        let mut row = vec![0.0; k + 1];
                        if !confident {
                            let v = ((i * 7 + e * 3) % 5 + 1) as f64;
                            row.iter_mut().enumerate().for_each(|(j, r)| *r = v + j as f64);
                            let s: f64 = row.iter().sum();
                            row.iter_mut().for_each(|r| *r /= s);
                        } else if let Some(l) = classes.iter().position(|&c| c == y) {
                            row[l] = 1.0;
                        } else {
                            row[k] = 1.0;
                        }
                        row
                    })
                    .collect();
                member(name, classes, true, rows)
            })
            .collect();
        (EnsembleOutputs::new(members).unwrap(), labels)
    }

    fn soft_vote_all(outputs: &EnsembleOutputs) -> Vec<FullPosterior> {
        (0..outputs.len())
            .map(|i| fuse_soft_vote(&outputs.sample_probabilities(i), &outputs.layouts()).unwrap())
            .collect()
    }

    #[test]
    fn confident_experts_give_identity_matrix() {
        let (outputs, labels) = three_experts(true);
        let m = expert_confusion_matrix(&outputs, &soft_vote_all(&outputs), &labels, &folds()).unwrap();
        for r in 0..3 {
            for c in 0..3 {
                assert_eq!(m.percent[r][c], if r == c { 100.0 } else { 0.0 });
            }
        }
        assert_eq!(m.diagonal_mass().unwrap(), 100.0);
    }

    #[test]
    fn confusion_rows_sum_to_hundred() {
        let (outputs, labels) = three_experts(false);
        let m = expert_confusion_matrix(&outputs, &soft_vote_all(&outputs), &labels, &folds()).unwrap();
        for (row, counts) in m.percent.iter().zip(&m.counts) {
            if counts.iter().sum::<usize>() > 0 {
                assert!((row.iter().sum::<f64>() - 100.0).abs() < 0.01);
            }
        }
        assert!(m.to_csv().starts_with("fold,manyshot,mediumshot,fewshot\n"));
    }

    #[test]
    fn uniform_partials_land_in_the_fifth_bin() {
        let rows = vec![vec![0.2; 5]; 7];
        let m = member("e", &[0, 1, 2, 3], true, rows);
        let samples: Vec<usize> = (0..7).collect();
        let h = msp_histogram(&m, &samples, 20, MspSource::Partial, "all").unwrap();
        assert_eq!(h.counts[4], 7);
        assert!(h.edges[4] <= 0.2 && 0.2 < h.edges[5]);
        assert_eq!(h.total(), 7);
    }

    #[test]
    fn expanded_msp_uses_spread_reject_mass() {
        let m = member("e", &[0], true, vec![vec![0.1, 0.9]]);
        let h = msp_histogram(&m, &[0], 10, MspSource::Expanded, "x").unwrap();
        // 0.9 spread over 3 classes -> 0.3
        assert_eq!(h.counts[3], 1);
        let p = msp_histogram(&m, &[0], 10, MspSource::Partial, "x").unwrap();
        assert_eq!(p.counts[9], 1);
    }

    fn table(name: &str, rows: Vec<Vec<f64>>) -> ExternalPosteriorTable {
        let ids = (0..rows.len() as u64).collect();
        ExternalPosteriorTable::new(name.into(), 4, ids, rows).unwrap()
    }

    #[test]
    fn ablation_with_duplicates_is_flat() {
        let rows = vec![
            vec![0.7, 0.1, 0.1, 0.1],
            vec![0.1, 0.1, 0.1, 0.7],
            vec![0.1, 0.6, 0.2, 0.1],
        ];
        let labels = [0usize, 3, 2];
        let models = [table("a", rows.clone()), table("b", rows)];
        let out = take_one_out_ablation(&models, &|id| labels.get(id as usize).copied(), &folds(), AblationFusion::SoftVote)
            .unwrap();
        assert_eq!(out.len(), 3);
        assert!(out.iter().all(|r| r.report == out[0].report));
        assert_eq!(out[1].removed.as_deref(), Some("a"));
        assert_eq!(out[2].models, vec!["a".to_string()]);
    }

    #[test]
    fn ablation_needs_two_models() {
        let models = [table("a", vec![vec![0.25; 4]])];
        assert!(take_one_out_ablation(&models, &|_| Some(0), &folds(), AblationFusion::SoftVote).is_err());
    }

    #[test]
    fn calibrated_ablation_runs() {
        let a = table("a", vec![vec![0.7, 0.1, 0.1, 0.1], vec![0.2, 0.2, 0.2, 0.4]]);
        let b = table("b", vec![vec![0.4, 0.3, 0.2, 0.1], vec![0.1, 0.1, 0.1, 0.7]]);
        let val = [a.clone(), b.clone()];
        let labels = [0usize, 3];
        let options = CalibrationOptions::default();
        let fusion = AblationFusion::Calibrated {
            val: &val,
            val_labels: &labels,
            options: &options,
        };
        let out = take_one_out_ablation(&[a, b], &|id| labels.get(id as usize).copied(), &folds(), fusion).unwrap();
        assert_eq!(out[0].report.accuracy.all, Some(1.0));
    }
}
