//! Joint calibration: per-member elementwise scale and shift of the logits,
//! fitted so that the soft-vote of the recalibrated posteriors minimises
//! validation cross-entropy.

use serde::{Deserialize, Serialize};

use super::{average_expanded, check_members, EnsembleOutputs, FullPosterior, MemberOutputs, PosteriorLayout};
use crate::error::{Error, Result};
use crate::network::{softmax, PROB_FLOOR};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemberCalibration {
    pub scale: Vec<f64>,
    pub shift: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationParams {
    pub members: Vec<MemberCalibration>,
}

impl CalibrationParams {
    /// Scale 1, shift 0 for every output of every member.
    pub fn identity(layouts: &[PosteriorLayout]) -> Self {
        Self {
            members: layouts
                .iter()
                .map(|l| MemberCalibration {
                    scale: vec![1.0; l.width()],
                    shift: vec![0.0; l.width()],
                })
                .collect(),
        }
    }

    fn zeros_like(&self) -> Self {
        Self {
            members: self
                .members
                .iter()
                .map(|m| MemberCalibration {
                    scale: vec![0.0; m.scale.len()],
                    shift: vec![0.0; m.shift.len()],
                })
                .collect(),
        }
    }

    pub fn check(&self, layouts: &[PosteriorLayout]) -> Result<()> {
        if self.members.len() != layouts.len()
            || self.members.iter().zip(layouts).any(|(m, l)| {
                m.scale.len() != l.width() || m.shift.len() != l.width()
            })
        {
            return Err(Error::config("calibration parameters do not match the ensemble"));
        }
        if !self.values().all(f64::is_finite) {
            return Err(Error::NonFinite("calibration parameters"));
        }
        Ok(())
    }

    fn values(&self) -> impl Iterator<Item = f64> + '_ {
        self.members
            .iter()
            .flat_map(|m| m.scale.iter().chain(&m.shift).copied())
    }

    fn values_mut(&mut self) -> impl Iterator<Item = &mut f64> + '_ {
        self.members
            .iter_mut()
            .flat_map(|m| m.scale.iter_mut().chain(m.shift.iter_mut()))
    }
}

/// Full-batch gradient descent with heavy-ball momentum.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CalibrationOptions {
    pub steps: usize,
    pub learning_rate: f64,
    pub momentum: f64,
}

impl Default for CalibrationOptions {
    fn default() -> Self {
        Self {
            steps: 500,
            learning_rate: 0.05,
            momentum: 0.9,
        }
    }
}

#[derive(Debug, Clone)]
pub struct CalibrationOutcome {
    /// Lowest-loss parameters visited.
    pub params: CalibrationParams,
    pub initial_loss: f64,
    pub final_loss: f64,
}

fn recalibrated(z: &[f64], m: &MemberCalibration) -> Vec<f64> {
    softmax(
        &z.iter()
            .zip(&m.scale)
            .zip(&m.shift)
            .map(|((z, w), b)| w * z + b)
            .collect::<Vec<_>>(),
    )
}

/// `sum_E g(softmax(w_E * z_E + b_E)) / Z`.
pub fn fuse_calibrated(
    logits: &[&[f64]],
    params: &CalibrationParams,
    layouts: &[PosteriorLayout],
) -> Result<FullPosterior> {
    check_members(logits.len(), layouts)?;
    params.check(layouts)?;
    let partials: Vec<Vec<f64>> = logits
        .iter()
        .zip(&params.members)
        .map(|(z, m)| recalibrated(z, m))
        .collect();
    let refs: Vec<&[f64]> = partials.iter().map(Vec::as_slice).collect();
    average_expanded(&refs, layouts)
}

/// Member outputs with every member's logits rescaled and shifted, so that
/// downstream soft-voting reproduces [`fuse_calibrated`].
pub fn apply_calibration(outputs: &EnsembleOutputs, params: &CalibrationParams) -> Result<EnsembleOutputs> {
    params.check(&outputs.layouts())?;
    let members = outputs
        .members()
        .iter()
        .zip(&params.members)
        .map(|(member, m)| {
            let logits: Vec<Vec<f64>> = member
                .logits
                .iter()
                .map(|z| z.iter().zip(&m.scale).zip(&m.shift).map(|((z, w), b)| w * z + b).collect())
                .collect();
            MemberOutputs {
                name: member.name.clone(),
                layout: member.layout.clone(),
                probabilities: logits.iter().map(|z: &Vec<f64>| softmax(z)).collect(),
                logits,
            }
        })
        .collect();
    EnsembleOutputs::new(members)
}

/// Mean validation cross-entropy of the calibrated fusion and its gradient.
pub fn calibration_objective(
    params: &CalibrationParams,
    outputs: &EnsembleOutputs,
    labels: &[usize],
) -> Result<(f64, CalibrationParams)> {
    let layouts = outputs.layouts();
    params.check(&layouts)?;
    if labels.len() != outputs.len() || labels.is_empty() {
        return Err(Error::config("one label per calibration sample is required"));
    }
    let class_count = outputs.class_count();
    let mut grad = params.zeros_like();
    let mut loss = 0.0;
    let scale = 1.0 / labels.len() as f64;

    for (i, &y) in labels.iter().enumerate() {
        let logits = outputs.sample_logits(i);
        let partials: Vec<Vec<f64>> = logits
            .iter()
            .zip(&params.members)
            .map(|(z, m)| recalibrated(z, m))
            .collect();
        let mut summed = vec![0.0; class_count];
        for (p, layout) in partials.iter().zip(&layouts) {
            let e = super::expand_partial(p, layout)?;
            summed.iter_mut().zip(&e.posterior).for_each(|(s, v)| *s += v);
        }
        let z_norm: f64 = summed.iter().sum();
        let s_y = summed[y];
        loss -= (s_y / z_norm).max(PROB_FLOOR).ln() * scale;

        // dL/d(summed_c) = -[c == y] / s_y + 1 / Z
        let d_sum = |c: usize| -> f64 {
            let own = if c == y { -1.0 / s_y } else { 0.0 };
            own + 1.0 / z_norm
        };
        for (((p, layout), z), (m_grad, _)) in partials
            .iter()
            .zip(&layouts)
            .zip(&logits)
            .zip(grad.members.iter_mut().zip(&params.members))
        {
            let k = layout.classes().len();
            let mut g_p = vec![0.0; layout.width()];
            match layout.reject_index() {
                Some(r) if layout.out_of_subset() > 0 => {
                    for (local, &c) in layout.classes().iter().enumerate() {
                        g_p[local] = d_sum(c);
                    }
                    let outside = layout.out_of_subset() as f64;
                    g_p[r] = (0..class_count)
                        .filter(|&c| !layout.covers(c))
                        .map(d_sum)
                        .sum::<f64>()
                        / outside;
                }
                Some(r) => {
                    let kept = 1.0 - p[r];
                    let mut weighted = 0.0;
                    for (local, &c) in layout.classes().iter().enumerate() {
                        g_p[local] = d_sum(c) / kept;
                        weighted += d_sum(c) * p[local];
                    }
                    g_p[r] = weighted / (kept * kept);
                }
                None => {
                    for (local, &c) in layout.classes().iter().enumerate() {
                        g_p[local] = d_sum(c);
                    }
                }
            }
            debug_assert!(g_p.len() == k + usize::from(layout.has_reject()));
            let mean: f64 = p.iter().zip(&g_p).map(|(p, g)| p * g).sum();
            for j in 0..p.len() {
                let d_u = p[j] * (g_p[j] - mean) * scale;
                m_grad.scale[j] += d_u * z[j];
                m_grad.shift[j] += d_u;
            }
        }
    }
    Ok((loss, grad))
}

/// Worst relative error between [`calibration_objective`]'s gradient and
/// central finite differences.
pub fn calibration_finite_diff_check(
    params: &CalibrationParams,
    outputs: &EnsembleOutputs,
    labels: &[usize],
    eps: f64,
) -> Result<f64> {
    if !(eps.is_finite() && eps > 0.0) {
        return Err(Error::config("finite-difference step must be positive"));
    }
    let (_, analytic) = calibration_objective(params, outputs, labels)?;
    let analytic: Vec<f64> = analytic.values().collect();
    let mut probe = params.clone();
    let mut worst = 0.0f64;
    for (j, &exact) in analytic.iter().enumerate() {
        let original = *probe.values_mut().nth(j).expect("index in range");
        *probe.values_mut().nth(j).expect("index in range") = original + eps;
        let plus = calibration_objective(&probe, outputs, labels)?.0;
        *probe.values_mut().nth(j).expect("index in range") = original - eps;
        let minus = calibration_objective(&probe, outputs, labels)?.0;
        *probe.values_mut().nth(j).expect("index in range") = original;
        let numeric = (plus - minus) / (2.0 * eps);
        worst = worst.max(crate::network::relative_error(exact, numeric));
    }
    Ok(worst)
}

/// Fits scale and shift vectors from the identity by gradient descent.
pub fn train_joint_calibration(
    val: &EnsembleOutputs,
    labels: &[usize],
    options: &CalibrationOptions,
) -> Result<CalibrationOutcome> {
    if !(options.learning_rate.is_finite() && options.learning_rate > 0.0) {
        return Err(Error::config("calibration learning rate must be positive"));
    }
    let mut params = CalibrationParams::identity(&val.layouts());
    let mut velocity = params.zeros_like();
    let (initial_loss, mut grad) = calibration_objective(&params, val, labels)?;
    let mut best = (initial_loss, params.clone());
    for step in 0..options.steps {
        for ((p, v), g) in params
            .values_mut()
            .zip(velocity.values_mut())
            .zip(grad.values())
        {
            *v = options.momentum * *v + g;
            *p -= options.learning_rate * *v;
        }
        let (loss, next) = calibration_objective(&params, val, labels)?;
        if !loss.is_finite() || !params.values().all(f64::is_finite) {
            return Err(Error::Divergence { epoch: step, loss });
        }
        if loss < best.0 {
            best = (loss, params.clone());
        }
        grad = next;
    }
    Ok(CalibrationOutcome {
        final_loss: best.0,
        params: best.1,
        initial_loss,
    })
}
