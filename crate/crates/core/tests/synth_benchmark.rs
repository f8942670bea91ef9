//! Directional checks on the 60-class synthetic benchmark, majority over five
//! seeds. The runs are shared between tests.

use std::sync::OnceLock;

use cbexperts::dataset::{generate_longtailed, Fold, GeneratorConfig};
use cbexperts::evaluation::{msp_histogram, EvalReport, MspSource};
use cbexperts::fusion::FusionStrategy;
use cbexperts::network::argmax;
use cbexperts::pipeline::{run_benchmark, BenchmarkRun, PipelineConfig};
use rayon::prelude::*;

const SEEDS: u64 = 5;
const MAJORITY: usize = 3;

struct Seed {
    run: BenchmarkRun,
    baseline: EvalReport,
    uniform: EvalReport,
    oracle: EvalReport,
    softvote: EvalReport,
    stack: EvalReport,
    singles: Vec<EvalReport>,
}

fn seed_run(seed: u64) -> Seed {
    let bundle = generate_longtailed(&GeneratorConfig::synth60(), seed).unwrap();
    let run = run_benchmark(&bundle, &PipelineConfig::default().seeded(seed)).unwrap();
    let softvote = run.fused(FusionStrategy::Softvote).unwrap();
    Seed {
        baseline: run.baseline_report().unwrap(),
        uniform: run.uniform_report().unwrap(),
        oracle: run.oracle_report().unwrap(),
        stack: run.fused(FusionStrategy::Stack).unwrap().report,
        singles: (0..3).map(|i| run.single_expert_report(i).unwrap()).collect(),
        softvote: softvote.report,
        run,
    }
}

fn runs() -> &'static [Seed] {
    static RUNS: OnceLock<Vec<Seed>> = OnceLock::new();
    RUNS.get_or_init(|| (0..SEEDS).into_par_iter().map(seed_run).collect())
}

fn majority(label: &str, check: impl Fn(&Seed) -> bool) {
    let passed = runs().iter().filter(|s| check(s)).count();
    assert!(passed >= MAJORITY, "{label}: only {passed}/{SEEDS} seeds");
}

#[test]
fn baseline_favours_manyshot() {
    majority("baseline many > few", |s| {
        s.baseline.fold(Fold::Manyshot) > s.baseline.fold(Fold::Fewshot)
    });
}

#[test]
fn uniform_finetune_helps_fewshot() {
    majority("uniform few >= baseline few", |s| {
        s.uniform.fold(Fold::Fewshot) >= s.baseline.fold(Fold::Fewshot)
    });
}

#[test]
fn fewshot_expert_beats_baseline_on_its_classes() {
    // The oracle's Fewshot accuracy is the Fewshot expert's restricted argmax.
    majority("few expert > baseline few", |s| {
        s.oracle.fold(Fold::Fewshot) > s.baseline.fold(Fold::Fewshot)
    });
}

#[test]
fn oracle_routing_beats_soft_vote() {
    majority("oracle all >= softvote all", |s| s.oracle.all() >= s.softvote.all());
}

#[test]
fn stacker_dominates_single_experts() {
    majority("stack all >= best single expert", |s| {
        let best = s.singles.iter().map(EvalReport::all).fold(f64::NEG_INFINITY, f64::max);
        s.stack.all() >= best
    });
}

#[test]
fn manyshot_expert_is_more_confident_on_its_samples() {
    majority("manyshot expert mean msp > fewshot expert", |s| {
        let run = &s.run;
        let members = run.expert_test.members();
        let subset = &run.partition.subsets[0];
        let population: Vec<usize> = (0..run.test_labels.len())
            .filter(|&i| {
                let y = run.test_labels[i];
                run.folds().fold(y) == Fold::Manyshot && subset.local(y) == Some(argmax(&members[0].probabilities[i]))
            })
            .collect();
        let mean = |m: usize| {
            msp_histogram(&members[m], &population, 20, MspSource::Expanded, "many")
                .unwrap()
                .mean
                .unwrap()
        };
        mean(0) > mean(2)
    });
}

#[test]
fn rho_above_one_when_reject_dominates() {
    // 30 classes, n_max 1000, alpha 2: reject samples outnumber the
    // Fewshot subset roughly 15:1.
    let config = GeneratorConfig {
        classes: 30,
        n_max: 1000,
        alpha: 2.0,
        ..GeneratorConfig::synth60()
    };
    let picks: Vec<f64> = (0..SEEDS)
        .into_par_iter()
        .map(|seed| {
            let bundle = generate_longtailed(&config, seed).unwrap();
            let freq = bundle.train.class_frequency();
            let run = run_benchmark(&bundle, &PipelineConfig::default().seeded(seed)).unwrap();
            let few = &run.partition.subsets[Fold::Fewshot.index()];
            let subset: usize = few.classes().iter().map(|&c| freq[c]).sum();
            assert!(bundle.train.len() - subset >= 10 * subset);
            run.experts[Fold::Fewshot.index()].rho
        })
        .collect();
    let above = picks.iter().filter(|&&r| r > 1.0).count();
    assert!(above >= MAJORITY, "fewshot rho picks {picks:?}");
}
