//! Fusing partial posteriors into a posterior over all classes.
//!
//! Each ensemble member is described by a [`PosteriorLayout`]: the global
//! classes its outputs cover and whether a trailing reject output is present.
//! Experts have layouts with a reject output; full-width models (baseline,
//! externally produced posteriors) cover every class and have none.

mod calibration;
mod external;
mod kl;
mod linear;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::SubsetSpec;
use crate::error::{Error, Result};
use crate::network::argmax;

pub use calibration::{
    apply_calibration, calibration_finite_diff_check, calibration_objective, fuse_calibrated,
    train_joint_calibration, CalibrationOptions, CalibrationOutcome, CalibrationParams,
    MemberCalibration,
};
pub use external::{
    fuse_models, ingest_external_posteriors, read_partial_posteriors, tables_to_outputs,
    write_full_posteriors, write_partial_posteriors, ExternalPosteriorTable, ModelFusion,
    PosteriorSidecar,
};
pub use kl::{fuse_kl_min, kl_objective, KlFusion, KlOptions};
pub use linear::{
    fuse_by_selection, fuse_by_stacking, train_expert_selector, train_stacker, FitOptions,
    SelectorModel, StackerModel,
};

/// Which global classes a member's outputs cover.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "LayoutRepr", into = "LayoutRepr")]
pub struct PosteriorLayout {
    class_count: usize,
    classes: Vec<usize>,
    local: Vec<Option<usize>>,
    reject: bool,
}

#[derive(Serialize, Deserialize)]
struct LayoutRepr {
    class_count: usize,
    classes: Vec<usize>,
    reject: bool,
}

impl TryFrom<LayoutRepr> for PosteriorLayout {
    type Error = Error;

    fn try_from(repr: LayoutRepr) -> Result<Self> {
        PosteriorLayout::new(repr.class_count, repr.classes, repr.reject)
    }
}

impl From<PosteriorLayout> for LayoutRepr {
    fn from(layout: PosteriorLayout) -> Self {
        LayoutRepr {
            class_count: layout.class_count,
            classes: layout.classes,
            reject: layout.reject,
        }
    }
}

impl PosteriorLayout {
    pub fn new(class_count: usize, classes: Vec<usize>, reject: bool) -> Result<Self> {
        if classes.is_empty() && !reject {
            return Err(Error::config("a posterior layout needs at least one output"));
        }
        let mut local = vec![None; class_count];
        for (i, &c) in classes.iter().enumerate() {
            if c >= class_count || local[c].replace(i).is_some() {
                return Err(Error::config(format!("invalid layout class {c}")));
            }
        }
        if !reject && classes.len() != class_count {
            return Err(Error::config(
                "a layout without reject output must cover every class",
            ));
        }
        Ok(Self {
            class_count,
            classes,
            local,
            reject,
        })
    }

    /// Full-width layout: output `c` is class `c`, no reject output.
    pub fn full(class_count: usize) -> Self {
        Self::new(class_count, (0..class_count).collect(), false).expect("valid full layout")
    }

    pub fn from_subset(subset: &SubsetSpec) -> Self {
        Self::new(subset.class_count(), subset.classes().to_vec(), true)
            .expect("subset specs are valid layouts")
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn classes(&self) -> &[usize] {
        &self.classes
    }

    pub fn has_reject(&self) -> bool {
        self.reject
    }

    /// Number of outputs: covered classes plus the reject output if any.
    pub fn width(&self) -> usize {
        self.classes.len() + usize::from(self.reject)
    }

    pub fn reject_index(&self) -> Option<usize> {
        self.reject.then_some(self.classes.len())
    }

    pub fn local(&self, class: usize) -> Option<usize> {
        self.local.get(class).copied().flatten()
    }

    pub fn covers(&self, class: usize) -> bool {
        self.local(class).is_some()
    }

    /// Number of classes outside the covered set.
    pub fn out_of_subset(&self) -> usize {
        self.class_count - self.classes.len()
    }
}

impl From<&SubsetSpec> for PosteriorLayout {
    fn from(subset: &SubsetSpec) -> Self {
        Self::from_subset(subset)
    }
}

/// Probability vector over all classes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FullPosterior {
    probabilities: Vec<f64>,
}

impl FullPosterior {
    /// Wraps a vector, checking non-negativity and unit mass within `tol`.
    pub fn new(probabilities: Vec<f64>, tol: f64) -> Result<Self> {
        let total: f64 = probabilities.iter().sum();
        if probabilities.is_empty()
            || probabilities.iter().any(|p| !(p.is_finite() && *p >= 0.0))
            || (total - 1.0).abs() > tol
        {
            return Err(Error::NonFinite("posterior"));
        }
        Ok(Self { probabilities })
    }

    /// Divides by the total mass; the input must have positive finite mass.
    pub fn normalized(mut values: Vec<f64>) -> Result<Self> {
        let total: f64 = values.iter().sum();
        if !(total.is_finite() && total > 0.0) || values.iter().any(|v| *v < 0.0) {
            return Err(Error::NonFinite("posterior normalisation"));
        }
        values.iter_mut().for_each(|v| *v /= total);
        Ok(Self {
            probabilities: values,
        })
    }

    pub fn probabilities(&self) -> &[f64] {
        &self.probabilities
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.probabilities
    }

    pub fn len(&self) -> usize {
        self.probabilities.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probabilities.is_empty()
    }

    /// Predicted class; ties go to the lowest index.
    pub fn argmax(&self) -> usize {
        argmax(&self.probabilities)
    }

    pub fn max(&self) -> f64 {
        self.probabilities[self.argmax()]
    }
}

/// Result of the expansion map g.
#[derive(Debug, Clone, PartialEq)]
pub struct Expansion {
    pub posterior: Vec<f64>,
    /// Set when a full-coverage layout carried reject mass that had nowhere
    /// to go and was dropped before renormalising.
    pub dropped_reject: bool,
}

/// The map g: covered classes keep their probability, the reject
/// probability is spread evenly over the uncovered classes.
pub fn expand_partial(partial: &[f64], layout: &PosteriorLayout) -> Result<Expansion> {
    if partial.len() != layout.width() {
        return Err(Error::config(format!(
            "partial posterior has {} entries, layout expects {}",
            partial.len(),
            layout.width()
        )));
    }
    let mut out = vec![0.0; layout.class_count()];
    for (local, &class) in layout.classes().iter().enumerate() {
        out[class] = partial[local];
    }
    let Some(reject) = layout.reject_index() else {
        return Ok(Expansion {
            posterior: out,
            dropped_reject: false,
        });
    };
    let reject_mass = partial[reject];
    let outside = layout.out_of_subset();
    if outside > 0 {
        let share = reject_mass / outside as f64;
        for (class, value) in out.iter_mut().enumerate() {
            if !layout.covers(class) {
                *value = share;
            }
        }
        return Ok(Expansion {
            posterior: out,
            dropped_reject: false,
        });
    }
    let kept = 1.0 - reject_mass;
    if kept > 0.0 {
        out.iter_mut().for_each(|v| *v /= kept);
    } else {
        let uniform = 1.0 / layout.class_count() as f64;
        out.iter_mut().for_each(|v| *v = uniform);
    }
    Ok(Expansion {
        posterior: out,
        dropped_reject: reject_mass > 0.0,
    })
}

/// Averages expanded posteriors and renormalises.
fn average_expanded(
    partials: &[&[f64]],
    layouts: &[PosteriorLayout],
) -> Result<FullPosterior> {
    check_members(partials.len(), layouts)?;
    let mut sum = vec![0.0; layouts[0].class_count()];
    for (partial, layout) in partials.iter().zip(layouts) {
        let expanded = expand_partial(partial, layout)?;
        sum.iter_mut()
            .zip(&expanded.posterior)
            .for_each(|(s, v)| *s += v);
    }
    let members = partials.len() as f64;
    sum.iter_mut().for_each(|v| *v /= members);
    FullPosterior::normalized(sum)
}

fn check_members(count: usize, layouts: &[PosteriorLayout]) -> Result<()> {
    if count == 0 || count != layouts.len() {
        return Err(Error::config(format!(
            "fusion needs one layout per member and at least one member ({count} vs {})",
            layouts.len()
        )));
    }
    let class_count = layouts[0].class_count();
    if layouts.iter().any(|l| l.class_count() != class_count) {
        return Err(Error::config("fusion members disagree on the class count"));
    }
    Ok(())
}

/// Soft-voting: mean of the expanded partial posteriors.
pub fn fuse_soft_vote(partials: &[&[f64]], layouts: &[PosteriorLayout]) -> Result<FullPosterior> {
    average_expanded(partials, layouts)
}

/// Outputs of one ensemble member over every sample of a split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemberOutputs {
    pub name: String,
    pub layout: PosteriorLayout,
    /// Logits (after any reject correction); `softmax(logits[i]) == probabilities[i]`.
    pub logits: Vec<Vec<f64>>,
    pub probabilities: Vec<Vec<f64>>,
}

/// Per-member outputs over one split, all members aligned by sample.
#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleOutputs {
    members: Vec<MemberOutputs>,
}

impl EnsembleOutputs {
    pub fn new(members: Vec<MemberOutputs>) -> Result<Self> {
        let first = members
            .first()
            .ok_or_else(|| Error::config("an ensemble needs at least one member"))?;
        let n = first.probabilities.len();
        let class_count = first.layout.class_count();
        for m in &members {
            let width = m.layout.width();
            if m.probabilities.len() != n
                || m.logits.len() != n
                || m.layout.class_count() != class_count
                || m.probabilities.iter().chain(&m.logits).any(|r| r.len() != width)
            {
                return Err(Error::config(format!(
                    "member `{}` is not aligned with the rest of the ensemble",
                    m.name
                )));
            }
        }
        Ok(Self { members })
    }

    pub fn members(&self) -> &[MemberOutputs] {
        &self.members
    }

    pub fn len(&self) -> usize {
        self.members[0].probabilities.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn class_count(&self) -> usize {
        self.members[0].layout.class_count()
    }

    pub fn layouts(&self) -> Vec<PosteriorLayout> {
        self.members.iter().map(|m| m.layout.clone()).collect()
    }

    pub fn sample_probabilities(&self, i: usize) -> Vec<&[f64]> {
        self.members
            .iter()
            .map(|m| m.probabilities[i].as_slice())
            .collect()
    }

    pub fn sample_logits(&self, i: usize) -> Vec<&[f64]> {
        self.members.iter().map(|m| m.logits[i].as_slice()).collect()
    }

    /// Concatenated partial posteriors of sample `i`.
    pub fn concatenated(&self, i: usize) -> Vec<f64> {
        self.members
            .iter()
            .flat_map(|m| m.probabilities[i].iter().copied())
            .collect()
    }

    pub fn feature_width(&self) -> usize {
        self.members.iter().map(|m| m.layout.width()).sum()
    }

    /// Sub-ensemble with the members at `keep`, in that order.
    pub fn select(&self, keep: &[usize]) -> Result<Self> {
        Self::new(keep.iter().map(|&i| self.members[i].clone()).collect())
    }

    /// Index of the member whose layout covers `class` without a reject
    /// output being needed; first match wins.
    pub fn owner_of(&self, class: usize) -> Option<usize> {
        self.members.iter().position(|m| m.layout.covers(class))
    }
}

/// Strategy names accepted on the command line and in configs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FusionStrategy {
    Kl,
    Softvote,
    Select,
    Stack,
    Calibrate,
}

impl FusionStrategy {
    pub const ALL: [FusionStrategy; 5] = [
        FusionStrategy::Kl,
        FusionStrategy::Softvote,
        FusionStrategy::Select,
        FusionStrategy::Stack,
        FusionStrategy::Calibrate,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            FusionStrategy::Kl => "kl",
            FusionStrategy::Softvote => "softvote",
            FusionStrategy::Select => "select",
            FusionStrategy::Stack => "stack",
            FusionStrategy::Calibrate => "calibrate",
        }
    }
}

impl std::str::FromStr for FusionStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        FusionStrategy::ALL
            .into_iter()
            .find(|f| f.as_str() == s)
            .ok_or_else(|| Error::config(format!("unknown fusion strategy `{s}`")))
    }
}

/// Options for every trainable fusion strategy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct FusionOptions {
    pub kl: KlOptions,
    pub selector: FitOptions,
    pub stacker: FitOptions,
    pub calibration: CalibrationOptions,
}

/// A fusion strategy together with whatever it learned on validation data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "strategy", rename_all = "lowercase")]
pub enum FusionModel {
    Kl { options: KlOptions },
    Softvote,
    Select { selector: SelectorModel },
    Stack { stacker: StackerModel },
    Calibrate { params: CalibrationParams },
}

impl FusionModel {
    /// Fits `strategy` on validation outputs and labels.
    pub fn train(
        strategy: FusionStrategy,
        val: &EnsembleOutputs,
        labels: &[usize],
        options: &FusionOptions,
    ) -> Result<Self> {
        Ok(match strategy {
            FusionStrategy::Kl => FusionModel::Kl {
                options: options.kl.clone(),
            },
            FusionStrategy::Softvote => FusionModel::Softvote,
            FusionStrategy::Select => {
                let owners = owners_of(val, labels)?;
                FusionModel::Select {
                    selector: train_expert_selector(val, &owners, &options.selector)?,
                }
            }
            FusionStrategy::Stack => FusionModel::Stack {
                stacker: train_stacker(val, labels, &options.stacker)?,
            },
            FusionStrategy::Calibrate => FusionModel::Calibrate {
                params: train_joint_calibration(val, labels, &options.calibration)?.params,
            },
        })
    }

    pub fn strategy(&self) -> FusionStrategy {
        match self {
            FusionModel::Kl { .. } => FusionStrategy::Kl,
            FusionModel::Softvote => FusionStrategy::Softvote,
            FusionModel::Select { .. } => FusionStrategy::Select,
            FusionModel::Stack { .. } => FusionStrategy::Stack,
            FusionModel::Calibrate { .. } => FusionStrategy::Calibrate,
        }
    }

    pub fn fuse(&self, outputs: &EnsembleOutputs, i: usize) -> Result<FullPosterior> {
        let layouts = outputs.layouts();
        match self {
            FusionModel::Kl { options } => {
                Ok(fuse_kl_min(&outputs.sample_probabilities(i), &layouts, options)?.posterior)
            }
            FusionModel::Softvote => fuse_soft_vote(&outputs.sample_probabilities(i), &layouts),
            FusionModel::Select { selector } => {
                fuse_by_selection(&outputs.sample_probabilities(i), selector, &layouts)
            }
            FusionModel::Stack { stacker } => fuse_by_stacking(&outputs.concatenated(i), stacker),
            FusionModel::Calibrate { params } => {
                fuse_calibrated(&outputs.sample_logits(i), params, &layouts)
            }
        }
    }

    /// Fuses every sample; parallel over samples, order-preserving.
    pub fn fuse_all(&self, outputs: &EnsembleOutputs) -> Result<Vec<FullPosterior>> {
        (0..outputs.len())
            .into_par_iter()
            .map(|i| self.fuse(outputs, i))
            .collect()
    }
}

/// Owning member index of every label.
pub fn owners_of(outputs: &EnsembleOutputs, labels: &[usize]) -> Result<Vec<usize>> {
    labels
        .iter()
        .map(|&y| {
            outputs
                .owner_of(y)
                .ok_or_else(|| Error::config(format!("no ensemble member covers class {y}")))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::Fold;

    fn layout(class_count: usize, classes: &[usize]) -> PosteriorLayout {
        PosteriorLayout::new(class_count, classes.to_vec(), true).unwrap()
    }

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn expand_spreads_reject_mass() {
        let g = expand_partial(&[0.6, 0.3, 0.1], &layout(4, &[0, 1])).unwrap();
        assert!(close(&g.posterior, &[0.6, 0.3, 0.05, 0.05], 1e-15));
        assert!(!g.dropped_reject);

        let g = expand_partial(&[0.7, 0.3, 0.0], &layout(4, &[0, 1])).unwrap();
        assert_eq!(&g.posterior[2..], &[0.0, 0.0]);

        let g = expand_partial(&[0.4, 0.6], &layout(3, &[2])).unwrap();
        assert!(close(&g.posterior, &[0.3, 0.3, 0.4], 1e-15));
    }

    #[test]
    fn expand_full_coverage_drops_reject() {
        let g = expand_partial(&[0.3, 0.5, 0.2], &layout(2, &[1, 0])).unwrap();
        assert!(g.dropped_reject);
        assert!(close(&g.posterior, &[0.625, 0.375], 1e-15));
        let g = expand_partial(&[0.4, 0.6, 0.0], &layout(2, &[0, 1])).unwrap();
        assert!(!g.dropped_reject);
    }

    #[test]
    fn expand_checks_width() {
        assert!(expand_partial(&[0.5, 0.5], &layout(4, &[0, 1])).is_err());
    }

    #[test]
    fn soft_vote_two_experts() {
        let layouts = [layout(4, &[0, 1]), layout(4, &[2, 3])];
        let e1 = [0.8, 0.1, 0.1];
        let e2 = [0.3, 0.2, 0.5];
        let q = fuse_soft_vote(&[&e1, &e2], &layouts).unwrap();
        assert!(close(q.probabilities(), &[0.525, 0.175, 0.175, 0.125], 1e-15));
        let swapped = [layouts[1].clone(), layouts[0].clone()];
        let r = fuse_soft_vote(&[&e2, &e1], &swapped).unwrap();
        assert!(close(q.probabilities(), r.probabilities(), 1e-15));
    }

    #[test]
    fn soft_vote_single_expert_is_g() {
        let l = layout(5, &[4, 1]);
        let p = [0.2, 0.5, 0.3];
        let q = fuse_soft_vote(&[&p], std::slice::from_ref(&l)).unwrap();
        let g = expand_partial(&p, &l).unwrap();
        assert!(close(q.probabilities(), &g.posterior, 1e-15));
    }

    #[test]
    fn layout_from_subset() {
        let subset = SubsetSpec::new(Fold::Mediumshot, 6, vec![3, 2]).unwrap();
        let l = PosteriorLayout::from(&subset);
        assert_eq!(l.width(), 3);
        assert_eq!(l.reject_index(), Some(2));
        assert_eq!(l.local(2), Some(1));
        assert_eq!(l.out_of_subset(), 4);
        let full = PosteriorLayout::full(4);
        assert_eq!(full.width(), 4);
        assert!(PosteriorLayout::new(4, vec![0, 1], false).is_err());
    }

    #[test]
    fn strategy_names_round_trip() {
        for s in FusionStrategy::ALL {
            assert_eq!(s.as_str().parse::<FusionStrategy>().unwrap(), s);
        }
        assert!("vote".parse::<FusionStrategy>().is_err());
    }

    mod properties {
        use super::*;
        use crate::network::softmax;
        use proptest::prelude::*;

        /// Random partition of 0..C into 1..=3 expert layouts plus matching
        /// random partial posteriors.
        fn random_ensemble() -> impl Strategy<Value = (Vec<PosteriorLayout>, Vec<Vec<f64>>)> {
            (2usize..9, any::<u64>()).prop_flat_map(|(c, perm_seed)| {
                (
                    Just(c),
                    Just(perm_seed),
                    prop::collection::vec(0usize..3, c),
                    prop::collection::vec(-6.0f64..6.0, 3 * (c + 1)),
                )
            }).prop_map(|(c, _seed, owner, raw)| {
                let mut layouts = Vec::new();
                let mut partials = Vec::new();
                let mut offset = 0;
                for e in 0..3 {
                    let classes: Vec<usize> = (0..c).filter(|&k| owner[k] == e).collect();
                    if classes.is_empty() {
                        continue;
                    }
                    let width = classes.len() + 1;
                    partials.push(softmax(&raw[offset..offset + width]));
                    offset += width;
                    layouts.push(PosteriorLayout::new(c, classes, true).unwrap());
                }
                (layouts, partials)
            })
        }

        proptest! {
            #[test]
            fn g_preserves_mass((layouts, partials) in random_ensemble()) {
                for (p, l) in partials.iter().zip(&layouts) {
                    let g = expand_partial(p, l).unwrap();
                    prop_assert_eq!(g.posterior.len(), l.class_count());
                    prop_assert!((g.posterior.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                }
            }

            #[test]
            fn soft_vote_is_a_distribution_and_order_free((layouts, partials) in random_ensemble()) {
                let refs: Vec<&[f64]> = partials.iter().map(Vec::as_slice).collect();
                let q = fuse_soft_vote(&refs, &layouts).unwrap();
                prop_assert!((q.probabilities().iter().sum::<f64>() - 1.0).abs() < 1e-9);
                prop_assert!(q.probabilities().iter().all(|&p| p >= 0.0));
                let rev_refs: Vec<&[f64]> = refs.iter().rev().copied().collect();
                let rev_layouts: Vec<PosteriorLayout> = layouts.iter().rev().cloned().collect();
                let r = fuse_soft_vote(&rev_refs, &rev_layouts).unwrap();
                for (a, b) in q.probabilities().iter().zip(r.probabilities()) {
                    prop_assert!((a - b).abs() < 1e-15);
                }
            }
        }
    }
}
