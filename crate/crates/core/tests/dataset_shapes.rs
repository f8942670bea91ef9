//! Fold and subset arithmetic on benchmark-shaped class frequency tables.

use cbexperts::dataset::{
    assign_folds, partition_subsets, relabel_for_expert, EmbeddingDataset, Fold, FoldThresholds,
};

/// Class frequencies with the given per-fold class counts and sample totals.
fn shaped(classes: [usize; 3], samples: [usize; 3], max: usize, min: usize) -> Vec<usize> {
    let mut out = Vec::new();
    for (fold, (&k, &total)) in classes.iter().zip(&samples).enumerate() {
        let (first, last) = match fold {
            0 => (Some(max), None),
            2 => (None, Some(min)),
            _ => (None, None),
        };
        let rest = total - first.unwrap_or(0) - last.unwrap_or(0);
        let free = k - usize::from(first.is_some()) - usize::from(last.is_some());
        out.extend(first);
        out.extend((0..free).map(|i| rest / free + usize::from(i < rest % free)));
        out.extend(last);
    }
    out
}

fn dataset(frequencies: &[usize]) -> EmbeddingDataset {
    let labels: Vec<usize> = frequencies
        .iter()
        .enumerate()
        .flat_map(|(c, &f)| std::iter::repeat_n(c, f))
        .collect();
    let features = vec![0.0; labels.len()];
    EmbeddingDataset::new(1, frequencies.len(), features, labels).unwrap()
}

#[test]
fn imagenet_lt_folds_subsets_and_reject_count() {
    let freqs = shaped([391, 473, 136], [89_293, 24_910, 1_643], 1280, 5);
    let train = dataset(&freqs);
    assert_eq!(train.len(), 115_846);
    let folds = assign_folds(&train, FoldThresholds::default()).unwrap();
    assert_eq!(folds.counts(), [391, 473, 136]);
    let subsets = partition_subsets(&folds, &train).unwrap();
    let sizes: Vec<usize> = subsets.iter().map(|s| s.len()).collect();
    assert_eq!(sizes, [391, 473, 136]);

    let few = &subsets[Fold::Fewshot.index()];
    let relabelled = relabel_for_expert(&train, few).unwrap();
    assert_eq!(relabelled.class_frequency()[few.reject_index()], 89_293 + 24_910);
    assert_eq!(relabelled.class_frequency()[few.reject_index()], 114_203);
}

#[test]
fn places_lt_folds() {
    let freqs = shaped([132, 162, 71], [52_862, 8_834, 804], 4980, 5);
    let train = dataset(&freqs);
    assert_eq!(train.len(), 62_500);
    let folds = assign_folds(&train, FoldThresholds::default()).unwrap();
    assert_eq!(folds.counts(), [132, 162, 71]);
}
