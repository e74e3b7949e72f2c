use std::collections::BTreeSet;

use channel_moe::data::{
    generate_synthetic, load_tabular, normalize, split_dataset, Dataset, Normalization,
    SyntheticSpec, DEFAULT_SPLIT,
};
use channel_moe::tensor::Matrix;
use proptest::prelude::*;

fn spec(seed: u64, spc: usize) -> SyntheticSpec {
    SyntheticSpec {
        seed,
        samples_per_class: spc,
        ..SyntheticSpec::default()
    }
}

/// Row fingerprints, for comparing splits as multisets of samples.
fn rows(ds: &Dataset) -> Vec<(Vec<u64>, usize)> {
    let mut v: Vec<_> = ds
        .features
        .iter_rows()
        .zip(&ds.labels)
        .map(|(r, &y)| (r.iter().map(|x| x.to_bits()).collect(), y))
        .collect();
    v.sort();
    v
}

#[test]
fn default_split_sizes() {
    let ds = generate_synthetic(&spec(0, 150)).unwrap();
    assert_eq!(ds.len(), 1200);
    let s = split_dataset(&ds, DEFAULT_SPLIT, 4).unwrap();
    assert_eq!((s.train.len(), s.val.len(), s.test.len()), (900, 100, 200));
}

#[test]
fn splits_partition_the_dataset() {
    let ds = generate_synthetic(&spec(1, 40)).unwrap();
    let s = split_dataset(&ds, DEFAULT_SPLIT, 5).unwrap();
    let mut union = rows(&s.train);
    union.extend(rows(&s.val));
    union.extend(rows(&s.test));
    union.sort();
    assert_eq!(union, rows(&ds));
    let distinct: BTreeSet<_> = union.iter().collect();
    assert_eq!(distinct.len(), ds.len());
    assert_eq!(split_dataset(&ds, DEFAULT_SPLIT, 5).unwrap(), s);
}

#[test]
fn tiny_datasets_are_rejected() {
    let ds = Dataset::new(Matrix::zeros(11, 2), vec![0; 11], 1).unwrap();
    assert!(split_dataset(&ds, DEFAULT_SPLIT, 0).is_err());
    let ok = Dataset::new(Matrix::zeros(12, 2), vec![0; 12], 1).unwrap();
    assert!(split_dataset(&ok, DEFAULT_SPLIT, 0).is_ok());
}

#[test]
fn normalization_uses_train_statistics_only() {
    let ds = generate_synthetic(&spec(2, 60)).unwrap();
    let s = split_dataset(&ds, DEFAULT_SPLIT, 6).unwrap();
    let (n, stats) = s.normalized().unwrap();
    assert_eq!(stats, Normalization::fit(&s.train.features).unwrap());
    // val/test go through the same affine map and nothing else
    for (raw, out) in s.test.features.iter_rows().zip(n.test.features.iter_rows()) {
        for (j, (a, b)) in raw.iter().zip(out).enumerate() {
            assert!(((a - stats.mean[j]) / stats.std[j] - b).abs() < 1e-12);
        }
    }
    assert_eq!(n.test.labels, s.test.labels);
}

#[test]
fn normalized_columns_are_standard_and_idempotent() {
    let ds = generate_synthetic(&spec(3, 50)).unwrap();
    let (n, _) = normalize(&ds).unwrap();
    let stats = Normalization::fit(&n.features).unwrap();
    assert!(stats.mean.iter().all(|m| m.abs() < 1e-9));
    assert!(stats.std.iter().all(|s| (s - 1.0).abs() < 1e-9));
    let (again, _) = normalize(&n).unwrap();
    assert!(again.features.max_abs_diff(&n.features) < 1e-9);
}

#[test]
fn constant_column_becomes_zero() {
    let f = Matrix::from_rows(&[[1.0, 5.0], [2.0, 5.0], [3.0, 5.0]]).unwrap();
    let (n, _) = normalize(&Dataset::new(f, vec![0, 1, 0], 2).unwrap()).unwrap();
    assert!(n.features.iter_rows().all(|r| r[1] == 0.0));
}

#[test]
fn export_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ds.csv");
    let ds = generate_synthetic(&spec(4, 5)).unwrap();
    ds.export(&path).unwrap();
    let back = load_tabular(&path).unwrap();
    assert_eq!(back.features, ds.features);
    assert_eq!(back.labels, ds.labels);
}

#[test]
fn groups_are_separated_along_their_corners() {
    // nearest group corner recovers the specialty group of every sample
    let s = spec(5, 100);
    let ds = generate_synthetic(&s).unwrap();
    let corners: Vec<Vec<f64>> = (0..s.num_specialty_groups).map(|g| s.group_center(g)).collect();
    let hits = ds
        .features
        .iter_rows()
        .zip(&ds.labels)
        .filter(|(r, &y)| {
            let d = |c: &Vec<f64>| c.iter().zip(*r).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
            let best = (0..corners.len()).min_by(|&a, &b| d(&corners[a]).total_cmp(&d(&corners[b]))).unwrap();
            best == s.group_of(y)
        })
        .count();
    assert_eq!(hits, ds.len());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn generation_is_deterministic_and_balanced(seed in any::<u64>(), spc in 1usize..30) {
        let a = generate_synthetic(&spec(seed, spc)).unwrap();
        prop_assert_eq!(a.class_counts(), vec![spc; 8]);
        prop_assert!(a.features.is_finite());
        prop_assert_eq!(generate_synthetic(&spec(seed, spc)).unwrap(), a);
    }
}
