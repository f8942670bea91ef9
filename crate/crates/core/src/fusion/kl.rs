use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::{check_members, fuse_soft_vote, FullPosterior, PosteriorLayout};
use crate::error::{Error, Result};
use crate::network::softmax;

/// Descent settings for the per-sample KL fit. `step_size` is the inverse
/// of the initial damping.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct KlOptions {
    pub steps: usize,
    pub step_size: f64,
    /// Stop once one step improves the objective by less than this.
    pub tol: f64,
}

impl Default for KlOptions {
    fn default() -> Self {
        Self {
            steps: 200,
            step_size: 0.1,
            tol: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KlFusion {
    pub posterior: FullPosterior,
    pub objective: f64,
    pub initial_objective: f64,
    pub steps_taken: usize,
}

/// A partial posterior rewritten for comparison against q: layouts whose
/// reject output has no uncovered classes lose it (mass renormalised).
fn effective_partial(partial: &[f64], layout: &PosteriorLayout) -> (Vec<f64>, bool) {
    match layout.reject_index() {
        Some(r) if layout.out_of_subset() == 0 => {
            let kept = 1.0 - partial[r];
            let scaled = partial[..r]
                .iter()
                .map(|p| if kept > 0.0 { p / kept } else { 1.0 / r as f64 })
                .collect();
            (scaled, false)
        }
        Some(_) => (partial.to_vec(), true),
        None => (partial.to_vec(), false),
    }
}

fn kl_term(p: f64, a: f64) -> f64 {
    if p <= 0.0 {
        0.0
    } else {
        p * (p / a).ln()
    }
}

/// `sum_E KL(p_E || align_E(q))`, where `align_E(q)` keeps q on the covered
/// classes and sums the uncovered ones into a single reject entry.
pub fn kl_objective(q: &[f64], partials: &[&[f64]], layouts: &[PosteriorLayout]) -> f64 {
    let mut total = 0.0;
    for (partial, layout) in partials.iter().zip(layouts) {
        let (p, with_reject) = effective_partial(partial, layout);
        for (local, &class) in layout.classes().iter().enumerate() {
            total += kl_term(p[local], q[class]);
        }
        if with_reject {
            let outside: f64 = (0..q.len()).filter(|&c| !layout.covers(c)).map(|c| q[c]).sum();
            total += kl_term(p[layout.classes().len()], outside);
        }
    }
    total
}

/// Gradient of [`kl_objective`] with respect to the logits of q.
///
/// Per member: `q_i - t_i`, with `t_i = p_local(i)` for covered classes and
/// `t_i = p_reject * q_i / r` otherwise, `r` the uncovered mass of q.
fn kl_gradient(q: &[f64], partials: &[&[f64]], layouts: &[PosteriorLayout]) -> Vec<f64> {
    let mut grad = vec![0.0; q.len()];
    for (partial, layout) in partials.iter().zip(layouts) {
        let (p, with_reject) = effective_partial(partial, layout);
        let mass: f64 = p.iter().sum();
        let reject = if with_reject { p[layout.classes().len()] } else { 0.0 };
        let outside: f64 = (0..q.len()).filter(|&c| !layout.covers(c)).map(|c| q[c]).sum();
        for (i, g) in grad.iter_mut().enumerate() {
            let target = match layout.local(i) {
                Some(local) => p[local],
                None if outside > 0.0 => reject * q[i] / outside,
                None => reject / layout.out_of_subset() as f64,
            };
            *g += mass * q[i] - target;
        }
    }
    grad
}

/// Gradient and Hessian of [`kl_objective`] with respect to q itself.
///
/// Every class feeds exactly one output of every member, so both follow
/// from `-sum_E sum_i p_i ln (A_E q)_i`.
fn q_derivatives(q: &[f64], partials: &[&[f64]], layouts: &[PosteriorLayout]) -> (Vec<f64>, DMatrix<f64>) {
    let c = q.len();
    let mut grad = vec![0.0; c];
    let mut hess = DMatrix::zeros(c, c);
    for (partial, layout) in partials.iter().zip(layouts) {
        let (p, with_reject) = effective_partial(partial, layout);
        let reject = layout.classes().len();
        let output = |class: usize| layout.local(class).or(with_reject.then_some(reject));
        let mut aligned = vec![0.0; p.len()];
        for (class, &qc) in q.iter().enumerate() {
            if let Some(i) = output(class) {
                aligned[i] += qc;
            }
        }
        let outputs: Vec<Option<usize>> = (0..c).map(output).collect();
        for a in 0..c {
            let Some(i) = outputs[a] else { continue };
            if p[i] <= 0.0 {
                continue;
            }
            let ratio = p[i] / aligned[i].max(f64::MIN_POSITIVE);
            grad[a] -= ratio;
            let curvature = ratio / aligned[i].max(f64::MIN_POSITIVE);
            for b in 0..c {
                if outputs[b] == Some(i) {
                    hess[(a, b)] += curvature;
                }
            }
        }
    }
    (grad, hess)
}

/// Hessian of the objective with respect to the logits of q.
fn logit_hessian(q: &[f64], grad_q: &[f64], hess_q: &DMatrix<f64>) -> DMatrix<f64> {
    let c = q.len();
    let jac = DMatrix::from_fn(c, c, |a, b| if a == b { q[a] - q[a] * q[b] } else { -q[a] * q[b] });
    let u: Vec<f64> = q.iter().zip(grad_q).map(|(q, g)| q * g).collect();
    let total: f64 = u.iter().sum();
    let second = DMatrix::from_fn(c, c, |a, b| {
        let diag = if a == b { u[a] - total * q[a] } else { 0.0 };
        diag - u[a] * q[b] - q[a] * u[b] + 2.0 * total * q[a] * q[b]
    });
    &jac * hess_q * &jac + second
}

/// Posterior closest in summed KL divergence to every member's partial
/// posterior, found by damped Newton descent (Levenberg-Marquardt) on its
/// logits from the soft-vote solution.
///
/// The damping starts at `1 / step_size`, so the first steps are gradient
/// steps of that size; it shrinks after every accepted step and grows after
/// every rejected one. Only steps that lower the objective are accepted.
pub fn fuse_kl_min(
    partials: &[&[f64]],
    layouts: &[PosteriorLayout],
    options: &KlOptions,
) -> Result<KlFusion> {
    check_members(partials.len(), layouts)?;
    if !(options.step_size.is_finite() && options.step_size > 0.0) {
        return Err(Error::config("KL step size must be positive"));
    }
    let init = fuse_soft_vote(partials, layouts)?;
    let mut z: Vec<f64> = init.probabilities().iter().map(|p| (p + 1e-12).ln()).collect();
    let mut q = softmax(&z);
    let mut objective = kl_objective(&q, partials, layouts);
    if !objective.is_finite() {
        return Err(Error::NonFinite("KL fusion objective"));
    }
    let initial_objective = objective;
    let mut damping = 1.0 / options.step_size;
    let mut steps_taken = 0;
    let mut model = None;
    for _ in 0..options.steps {
        let (grad, hess) = model.get_or_insert_with(|| {
            let grad = kl_gradient(&q, partials, layouts);
            let (grad_q, hess_q) = q_derivatives(&q, partials, layouts);
            (grad, logit_hessian(&q, &grad_q, &hess_q))
        });
        if grad.iter().all(|g| g.abs() < 1e-14) {
            break;
        }
        let mut system = hess.clone();
        for i in 0..z.len() {
            system[(i, i)] += damping;
        }
        let Some(chol) = system.cholesky() else {
            damping *= 4.0;
            continue;
        };
        let step = chol.solve(&DVector::from_iterator(grad.len(), grad.iter().map(|g| -g)));
        let candidate: Vec<f64> = z.iter().zip(step.iter()).map(|(z, d)| z + d).collect();
        let candidate_q = softmax(&candidate);
        let candidate_objective = kl_objective(&candidate_q, partials, layouts);
        let improvement = objective - candidate_objective;
        if candidate_objective.is_finite() && improvement > 0.0 {
            z = candidate;
            q = candidate_q;
            objective = candidate_objective;
            steps_taken += 1;
            model = None;
            if improvement < options.tol && damping < 1.0 {
                break;
            }
            damping = (damping / 3.0).max(1e-9);
        } else {
            damping *= 4.0;
            if damping > 1e12 {
                break;
            }
        }
    }
    Ok(KlFusion {
        posterior: FullPosterior::normalized(q)?,
        objective,
        initial_objective,
        steps_taken,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn layout(c: usize, classes: &[usize]) -> PosteriorLayout {
        PosteriorLayout::new(c, classes.to_vec(), true).unwrap()
    }

    #[test]
    fn single_full_coverage_expert_is_recovered() {
        let l = layout(3, &[0, 1, 2]);
        let p = [0.5, 0.3, 0.2, 0.0];
        let fused = fuse_kl_min(&[&p], std::slice::from_ref(&l), &KlOptions::default()).unwrap();
        for (a, b) in fused.posterior.probabilities().iter().zip(&p[..3]) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn duplicated_expert_gives_same_answer() {
        let layouts = [layout(4, &[0, 1]), layout(4, &[2, 3])];
        let a = [0.5, 0.2, 0.3];
        let b = [0.4, 0.35, 0.25];
        let once = fuse_kl_min(&[&a, &b], &layouts, &KlOptions::default()).unwrap();
        let twice_layouts = [layouts[0].clone(), layouts[0].clone(), layouts[1].clone(), layouts[1].clone()];
        let twice = fuse_kl_min(&[&a, &a, &b, &b], &twice_layouts, &KlOptions::default()).unwrap();
        for (x, y) in once.posterior.probabilities().iter().zip(twice.posterior.probabilities()) {
            assert!((x - y).abs() < 2e-3, "{x} vs {y}");
        }
    }

    #[test]
    fn objective_never_increases() {
        let layouts = [layout(5, &[0, 1]), layout(5, &[2, 3]), layout(5, &[4])];
        let parts: [&[f64]; 3] = [&[0.6, 0.1, 0.3], &[0.05, 0.05, 0.9], &[0.2, 0.8]];
        let fused = fuse_kl_min(&parts, &layouts, &KlOptions::default()).unwrap();
        assert!(fused.objective <= fused.initial_objective);
        assert!(fused.steps_taken > 0);
    }

    #[test]
    fn logit_hessian_matches_finite_differences() {
        let layouts = [layout(4, &[0, 2]), layout(4, &[1]), PosteriorLayout::full(4)];
        let parts: [&[f64]; 3] = [&[0.3, 0.2, 0.5], &[0.7, 0.3], &[0.1, 0.2, 0.3, 0.4]];
        let z = [0.3, -0.2, 0.8, 0.1];
        let q = softmax(&z);
        let (grad_q, hess_q) = q_derivatives(&q, &parts, &layouts);
        let hess = logit_hessian(&q, &grad_q, &hess_q);
        let eps = 1e-6;
        for j in 0..4 {
            let mut zp = z;
            zp[j] += eps;
            let mut zm = z;
            zm[j] -= eps;
            let gp = kl_gradient(&softmax(&zp), &parts, &layouts);
            let gm = kl_gradient(&softmax(&zm), &parts, &layouts);
            for i in 0..4 {
                let num = (gp[i] - gm[i]) / (2.0 * eps);
                assert!((num - hess[(i, j)]).abs() < 1e-6, "entry ({i},{j}): {num} vs {}", hess[(i, j)]);
            }
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let layouts = [layout(4, &[0, 2]), layout(4, &[1]), PosteriorLayout::full(4)];
        let parts: [&[f64]; 3] = [&[0.3, 0.2, 0.5], &[0.7, 0.3], &[0.1, 0.2, 0.3, 0.4]];
        let z = [0.3, -0.2, 0.8, 0.1];
        let q = softmax(&z);
        let grad = kl_gradient(&q, &parts, &layouts);
        let eps = 1e-6;
        for i in 0..4 {
            let mut zp = z;
            zp[i] += eps;
            let mut zm = z;
            zm[i] -= eps;
            let num = (kl_objective(&softmax(&zp), &parts, &layouts)
                - kl_objective(&softmax(&zm), &parts, &layouts))
                / (2.0 * eps);
            assert!((num - grad[i]).abs() < 1e-7, "coordinate {i}: {num} vs {}", grad[i]);
        }
    }
}
