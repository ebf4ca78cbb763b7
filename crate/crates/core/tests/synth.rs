use std::collections::HashMap;

use connlens::embstore::{encode_container, mean_pool, Space};
use connlens::geometry::{knor, read_labels, retrieval_eval, Metric, Pooling};
use connlens::synth::{generate, write_labels, SynthKind, SynthSpec};
use connlens::Error;
use nalgebra::DMatrix;
use proptest::prelude::*;

fn rows(data: &[f32], width: usize) -> DMatrix<f64> {
    DMatrix::from_row_iterator(data.len() / width, width, data.iter().map(|&v| v as f64))
}

#[test]
fn orthogonal_preserves_pairwise_distances() {
    let set = generate(&SynthSpec::new(SynthKind::Orthogonal, 40, 2, 2, 16, 16).with_seed(3))
        .unwrap()
        .set;
    let pre = rows(set.tensor(Space::Pre), 16);
    let post = rows(set.tensor(Space::Post), 16);
    for i in 0..pre.nrows() {
        for j in (i + 1)..pre.nrows() {
            let a = (pre.row(i) - pre.row(j)).norm();
            let b = (post.row(i) - post.row(j)).norm();
            assert!((a - b).abs() <= 1e-5 * a.max(1.0), "({i},{j}): {a} vs {b}");
        }
    }
}

#[test]
fn linear_map_is_exactly_recoverable() {
    let set = generate(&SynthSpec::new(SynthKind::LinearMap, 50, 2, 1, 4, 6).with_seed(4))
        .unwrap()
        .set;
    let pre = rows(set.tensor(Space::Pre), 4);
    let post = rows(set.tensor(Space::Post), 6);
    // least squares pre ≈ post · B
    let b = post.clone().svd(true, true).solve(&pre, 1e-12).unwrap();
    let resid = (&post * b - &pre).norm() / pre.norm();
    assert!(resid < 1e-6, "{resid}");
}

#[test]
fn compressive_merges_blocks_linearly() {
    let spec = SynthSpec::new(SynthKind::Compressive, 6, 4, 4, 2, 10).with_seed(5);
    let set = generate(&spec).unwrap().set;
    assert_eq!(set.dims().s_post, 4);
    let pre = set.tensor(Space::Pre);
    // concatenate every 2x2 block of pre patches by hand
    let mut merged = Vec::new();
    for i in 0..6 {
        for br in 0..2 {
            for bc in 0..2 {
                for (dr, dc) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                    let p = (2 * br + dr) * 4 + 2 * bc + dc;
                    merged.extend_from_slice(&pre[(i * 16 + p) * 2..(i * 16 + p + 1) * 2]);
                }
            }
        }
    }
    let merged = rows(&merged, 8);
    let post = rows(set.tensor(Space::Post), 10);
    let w = post.clone().svd(true, true).solve(&merged, 1e-12).unwrap();
    let resid = (&post * w - &merged).norm() / merged.norm();
    assert!(resid < 1e-6, "{resid}");
}

#[test]
fn permuted_post_is_a_reordering_of_pre() {
    let set = generate(&SynthSpec::new(SynthKind::Permuted, 30, 1, 2, 3, 3).with_seed(6))
        .unwrap()
        .set;
    let key = |v: &[f32]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
    let mut a: Vec<_> = set.tensor(Space::Pre).chunks(6).map(key).collect();
    let mut b: Vec<_> = set.tensor(Space::Post).chunks(6).map(key).collect();
    assert_ne!(a, b);
    a.sort();
    b.sort();
    assert_eq!(a, b);
}

#[test]
fn noise_degrades_geometry() {
    let base = SynthSpec::new(SynthKind::Noisy, 150, 1, 1, 8, 8).with_seed(7);
    let clean = generate(&base.clone().with_noise(0.0)).unwrap().set;
    assert_eq!(clean.tensor(Space::Pre), clean.tensor(Space::Post));
    let mild = knor(
        &generate(&base.clone().with_noise(0.3)).unwrap().set,
        10,
        Metric::L2,
        Pooling::Mean,
    )
    .unwrap();
    let heavy = knor(
        &generate(&base.with_noise(3.0)).unwrap().set,
        10,
        Metric::L2,
        Pooling::Mean,
    )
    .unwrap();
    assert!(mild.average > heavy.average);
    assert!(mild.average < 1.0);
}

#[test]
fn degrading_connector_lowers_recall() {
    let spec = SynthSpec::new(SynthKind::Noisy, 200, 1, 1, 8, 8)
        .with_seed(8)
        .with_classes(5)
        .with_noise(8.0);
    let out = generate(&spec).unwrap();
    let labels: HashMap<String, String> = out.labels.clone().unwrap().into_iter().collect();
    let pre = retrieval_eval(&out.set, &labels, Metric::L2, Space::Pre, &[5]).unwrap();
    let post = retrieval_eval(&out.set, &labels, Metric::L2, Space::Post, &[5]).unwrap();
    assert!(post.recall[&5] < pre.recall[&5]);
}

#[test]
fn labels_round_trip_through_csv() {
    let out = generate(&SynthSpec::new(SynthKind::Identity, 12, 1, 1, 2, 2).with_classes(3)).unwrap();
    let labels = out.labels.unwrap();
    assert_eq!(labels[4], ("s04".to_string(), "c1".to_string()));
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("labels.csv");
    write_labels(&labels, &path).unwrap();
    let back = read_labels(&path).unwrap();
    assert_eq!(back.len(), 12);
    assert!(labels.iter().all(|(id, l)| &back[id] == l));
}

#[test]
fn class_centroids_separate_clusters() {
    let out = generate(&SynthSpec::new(SynthKind::Identity, 60, 2, 2, 6, 6).with_classes(4)).unwrap();
    let pooled = mean_pool(&out.set, Space::Pre);
    let labels = out.labels.unwrap();
    // same-class pooled vectors sit closer than the class separation scale
    let dist = |a: usize, b: usize| {
        pooled
            .row(a)
            .iter()
            .zip(pooled.row(b))
            .map(|(x, y)| (x - y).powi(2))
            .sum::<f64>()
            .sqrt()
    };
    assert_eq!(labels[0].1, labels[4].1);
    assert!(dist(0, 4) < dist(0, 1));
}

#[test]
fn invalid_specs_rejected() {
    let cases = [
        SynthSpec::new(SynthKind::Identity, 0, 1, 1, 2, 2),
        SynthSpec::new(SynthKind::Orthogonal, 4, 1, 1, 2, 3),
        SynthSpec::new(SynthKind::LinearMap, 4, 1, 1, 4, 2),
        SynthSpec::new(SynthKind::Compressive, 4, 3, 2, 2, 8),
        SynthSpec::new(SynthKind::Compressive, 4, 2, 2, 2, 7),
        SynthSpec::new(SynthKind::Noisy, 4, 1, 1, 2, 2).with_classes(0),
        SynthSpec::new(SynthKind::Noisy, 4, 1, 1, 2, 2).with_noise(-1.0),
    ];
    for spec in cases {
        assert!(matches!(generate(&spec), Err(Error::InvalidConfig(_))), "{spec:?}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn generation_is_deterministic(seed in any::<u64>(), kind_idx in 0usize..6) {
        let kind = SynthKind::ALL[kind_idx];
        let (dp, dq) = match kind {
            SynthKind::Identity | SynthKind::Orthogonal => (3, 3),
            SynthKind::Compressive => (2, 8),
            _ => (3, 5),
        };
        let spec = SynthSpec::new(kind, 5, 2, 2, dp, dq).with_seed(seed);
        let a = encode_container(&generate(&spec).unwrap().set).unwrap();
        let b = encode_container(&generate(&spec).unwrap().set).unwrap();
        prop_assert_eq!(a, b);
    }
}
