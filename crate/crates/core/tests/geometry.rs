mod common;

use std::collections::{BTreeSet, HashMap};

use common::{ids, random_set, rng};
use connlens::embstore::{mean_pool, EmbeddingSet, SetDims, Space};
use connlens::geometry::{knor, knor_multi, overlap_ratio, retrieval_eval, Metric, NeighborIndex, Pooling};
use connlens::linalg::Matrix;
use connlens::synth::{generate, SynthKind, SynthSpec};
use connlens::Error;
use proptest::prelude::*;
use rand::Rng;

/// Full pairwise scan, full sort, self excluded, ties by row.
fn oracle_knn(m: &Matrix, q: usize, k: usize, metric: Metric) -> Vec<usize> {
    let mut all: Vec<(usize, f64)> = (0..m.rows())
        .filter(|&j| j != q)
        .map(|j| {
            let mut s = 0.0;
            for d in 0..m.cols() {
                s += match metric {
                    Metric::L2 => (m[(q, d)] - m[(j, d)]) * (m[(q, d)] - m[(j, d)]),
                    Metric::Ip => m[(q, d)] * m[(j, d)],
                };
            }
            (j, if metric == Metric::Ip { -s } else { s })
        })
        .collect();
    all.sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap().then(a.0.cmp(&b.0)));
    all.into_iter().take(k).map(|(j, _)| j).collect()
}

fn random_matrix(rows: usize, cols: usize, seed: u64) -> Matrix {
    let mut r = rng(seed);
    Matrix::from_vec(
        rows,
        cols,
        (0..rows * cols).map(|_| r.random_range(-1.0..1.0)).collect(),
    )
}

fn set_from_pooled(pre: &Matrix, post: &Matrix) -> EmbeddingSet {
    let n = pre.rows();
    let dims = SetDims {
        n,
        s_pre: 1,
        d_pre: pre.cols(),
        s_post: 1,
        d_post: post.cols(),
        m1: 1,
        m2: 1,
    };
    let f = |m: &Matrix| m.as_slice().iter().map(|&v| v as f32).collect();
    EmbeddingSet::new(ids(n), dims, f(pre), f(post)).unwrap()
}

#[test]
fn build_requires_two_rows_and_finite_values() {
    let err = NeighborIndex::build(Matrix::zeros(1, 3), Metric::L2, false).unwrap_err();
    assert_eq!(err.to_string(), "need at least 2 vectors, got 1");
    let mut m = Matrix::zeros(3, 2);
    m.row_mut(2)[1] = f64::INFINITY;
    assert!(matches!(
        NeighborIndex::build(m, Metric::L2, false),
        Err(Error::NonFiniteRow(2))
    ));
    let ortho = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
    assert_eq!(NeighborIndex::build(ortho, Metric::Ip, false).unwrap().len(), 2);
}

#[test]
fn normalized_rows_have_unit_norm() {
    let idx = NeighborIndex::build(random_matrix(20, 5, 1), Metric::Ip, true).unwrap();
    for r in 0..20 {
        let n: f64 = idx.vectors().row(r).iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((n - 1.0).abs() < 1e-6);
    }
}

#[test]
fn one_dimensional_nearest() {
    let m = Matrix::from_rows(&[vec![0.0], vec![1.0], vec![10.0]]);
    let idx = NeighborIndex::build_with_ids(m, &["0".into(), "1".into(), "10".into()], Metric::L2, false).unwrap();
    let res = idx.knn(0, 1).unwrap();
    assert_eq!(res.rows().collect::<Vec<_>>(), vec![1]);
    assert!(matches!(idx.knn(0, 3), Err(Error::KOutOfRange { k: 3, max: 2 })));
    assert!(matches!(idx.knn(0, 0), Err(Error::KOutOfRange { .. })));
}

#[test]
fn ties_break_by_ascending_id() {
    // rows 1 and 2 coincide; ids make row 2 the lower id
    let m = Matrix::from_rows(&[vec![0.0, 0.0], vec![1.0, 1.0], vec![1.0, 1.0], vec![5.0, 5.0]]);
    let names = ["q".to_string(), "b".to_string(), "a".to_string(), "z".to_string()];
    let idx = NeighborIndex::build_with_ids(m, &names, Metric::L2, false).unwrap();
    assert_eq!(idx.knn(0, 2).unwrap().rows().collect::<Vec<_>>(), vec![2, 1]);
}

#[test]
fn large_spot_queries_match_naive_scan() {
    let m = random_matrix(1000, 64, 2);
    let idx = NeighborIndex::build(m.clone(), Metric::L2, false).unwrap();
    for q in [0, 17, 500, 999] {
        assert_eq!(
            idx.knn(q, 10).unwrap().rows().collect::<Vec<_>>(),
            oracle_knn(&m, q, 10, Metric::L2)
        );
    }
}

#[test]
fn knn_matches_full_sort_both_metrics() {
    let m = random_matrix(500, 32, 3);
    for metric in [Metric::L2, Metric::Ip] {
        let idx = NeighborIndex::build(m.clone(), metric, false).unwrap();
        let all = idx.knn_all(10).unwrap();
        for res in &all {
            assert_eq!(res.rows().collect::<Vec<_>>(), oracle_knn(&m, res.query, 10, metric));
            let scores: Vec<f64> = res.neighbors.iter().map(|n| n.1).collect();
            let sorted = scores.windows(2).all(|w| match metric {
                Metric::L2 => w[0] <= w[1],
                Metric::Ip => w[0] >= w[1],
            });
            assert!(sorted);
        }
    }
}

#[test]
fn knn_all_equals_sequential_queries() {
    let idx = NeighborIndex::build(random_matrix(200, 8, 4), Metric::L2, false).unwrap();
    let par = idx.knn_all(7).unwrap();
    for (q, r) in par.iter().enumerate() {
        assert_eq!(r, &idx.knn(q, 7).unwrap());
    }
}

#[test]
fn figure_example_two_of_three() {
    // A=0, B=1, C=2, D=3
    let (shared, ratio) = overlap_ratio(&[0, 1, 2], &[0, 1, 3]);
    assert_eq!(shared, 2);
    assert_eq!(ratio, 2.0 / 3.0);
    assert_eq!(format!("{ratio:.2}"), "0.67");
}

#[test]
fn identity_connector_gives_full_overlap() {
    let set = generate(&SynthSpec::new(SynthKind::Identity, 60, 2, 2, 6, 6).with_seed(5))
        .unwrap()
        .set;
    for rep in knor_multi(&set, &[1, 5, 20], Metric::L2, Pooling::Mean).unwrap() {
        assert_eq!(rep.average, 1.0);
        assert!(rep.per_sample.iter().all(|r| r.ratio == 1.0));
    }
}

#[test]
fn permuted_ratios_match_set_intersection_oracle() {
    let n = 200;
    let k = 10;
    let set = generate(&SynthSpec::new(SynthKind::Permuted, n, 1, 1, 8, 8).with_seed(9))
        .unwrap()
        .set;
    let rep = knor(&set, k, Metric::L2, Pooling::Mean).unwrap();
    let pre = mean_pool(&set, Space::Pre);
    let post = mean_pool(&set, Space::Post);
    for (q, rec) in rep.per_sample.iter().enumerate() {
        let a: BTreeSet<usize> = oracle_knn(&pre, q, k, Metric::L2).into_iter().collect();
        let b: BTreeSet<usize> = oracle_knn(&post, q, k, Metric::L2).into_iter().collect();
        let shared = a.intersection(&b).count();
        assert_eq!(rec.shared, shared);
        assert_eq!(rec.ratio, shared as f64 / k as f64);
    }
    let mean = rep.per_sample.iter().map(|r| r.ratio).sum::<f64>() / n as f64;
    assert_eq!(rep.average, mean);
}

#[test]
fn k_larger_than_set_rejected() {
    let set = random_set(5, 1, 2, 1, 2, 1);
    assert!(matches!(
        knor(&set, 5, Metric::L2, Pooling::Mean),
        Err(Error::KOutOfRange { .. })
    ));
}

fn labels_for(set: &EmbeddingSet, f: impl Fn(usize) -> String) -> HashMap<String, String> {
    set.ids().iter().enumerate().map(|(i, id)| (id.clone(), f(i))).collect()
}

#[test]
fn separable_clusters_recall_one() {
    let pre = Matrix::from_rows(&[vec![0.0, 0.0], vec![0.1, 0.0], vec![100.0, 100.0], vec![100.0, 100.1]]);
    let set = set_from_pooled(&pre, &pre);
    let labels = labels_for(&set, |i| if i < 2 { "a".into() } else { "b".into() });
    for space in [Space::Pre, Space::Post] {
        let rep = retrieval_eval(&set, &labels, Metric::L2, space, &[1]).unwrap();
        assert_eq!(rep.recall[&1], 1.0);
    }
}

#[test]
fn distinct_labels_recall_zero() {
    let set = random_set(10, 2, 3, 2, 3, 5);
    let labels = labels_for(&set, |i| format!("c{i}"));
    let rep = retrieval_eval(&set, &labels, Metric::Ip, Space::Pre, &[1, 5, 9]).unwrap();
    assert!(rep.recall.values().all(|&r| r == 0.0));
}

#[test]
fn missing_label_named() {
    let set = random_set(3, 1, 2, 1, 2, 6);
    let mut labels = labels_for(&set, |_| "x".into());
    labels.remove(&set.ids()[1]);
    let err = retrieval_eval(&set, &labels, Metric::L2, Space::Pre, &[1]).unwrap_err();
    assert_eq!(err.to_string(), format!("missing label for id {:?}", set.ids()[1]));
}

#[test]
fn clustered_recall_matches_naive_oracle() {
    let spec = SynthSpec::new(SynthKind::Noisy, 100, 2, 2, 6, 6)
        .with_classes(10)
        .with_noise(2.0)
        .with_seed(7);
    let out = generate(&SynthSpec { class_sep: 1.0, ..spec }).unwrap();
    let labels: HashMap<String, String> = out.labels.unwrap().into_iter().collect();
    let set = out.set;
    for space in [Space::Pre, Space::Post] {
        for metric in [Metric::L2, Metric::Ip] {
            let ks = [1, 5, 10];
            let rep = retrieval_eval(&set, &labels, metric, space, &ks).unwrap();
            let pooled = mean_pool(&set, space);
            for &k in &ks {
                let hits = (0..set.len())
                    .filter(|&q| {
                        oracle_knn(&pooled, q, k, metric)
                            .iter()
                            .any(|&j| labels[&set.ids()[j]] == labels[&set.ids()[q]])
                    })
                    .count();
                assert_eq!(rep.recall[&k], hits as f64 / set.len() as f64, "{space} {metric} k={k}");
            }
        }
    }
}

#[test]
fn heavy_noise_degrades_post_recall() {
    let spec = SynthSpec::new(SynthKind::Noisy, 200, 2, 2, 8, 8)
        .with_classes(10)
        .with_noise(6.0)
        .with_seed(8);
    let out = generate(&SynthSpec { class_sep: 1.0, ..spec }).unwrap();
    let labels: HashMap<String, String> = out.labels.unwrap().into_iter().collect();
    let pre = retrieval_eval(&out.set, &labels, Metric::L2, Space::Pre, &[5]).unwrap();
    let post = retrieval_eval(&out.set, &labels, Metric::L2, Space::Post, &[5]).unwrap();
    assert!(
        post.recall[&5] < pre.recall[&5],
        "{} vs {}",
        post.recall[&5],
        pre.recall[&5]
    );
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn orthogonal_post_transform_keeps_l2_neighbors(seed in any::<u64>(), n in 5usize..40, d in 1usize..6) {
        let pre = random_matrix(n, d, seed);
        let mut r = rng(seed ^ 1);
        let q = connlens::synth::random_orthogonal(d, &mut r).unwrap();
        let rotated = pre.matmul(&q).unwrap();
        let a = NeighborIndex::build(pre, Metric::L2, false).unwrap();
        let b = NeighborIndex::build(rotated, Metric::L2, false).unwrap();
        let k = (n - 1).min(4);
        for qrow in 0..n {
            let ra = a.knn(qrow, k).unwrap();
            let rb = b.knn(qrow, k).unwrap();
            for (x, y) in ra.neighbors.iter().zip(&rb.neighbors) {
                prop_assert!((x.1 - y.1).abs() <= 1e-5 * x.1.max(1e-12));
            }
        }
    }

    #[test]
    fn positive_scaling_keeps_l2_order(seed in any::<u64>(), alpha in 0.01f64..100.0) {
        let m = random_matrix(30, 4, seed);
        let a = NeighborIndex::build(m.clone(), Metric::L2, false).unwrap();
        let b = NeighborIndex::build(m.scale(alpha), Metric::L2, false).unwrap();
        for q in 0..30 {
            prop_assert_eq!(a.knn(q, 5).unwrap().rows().collect::<Vec<_>>(), b.knn(q, 5).unwrap().rows().collect::<Vec<_>>());
        }
    }

    #[test]
    fn ratios_are_multiples_of_one_over_k(seed in any::<u64>(), k in 1usize..8) {
        let set = random_set(12, 2, 3, 2, 4, seed);
        let rep = knor(&set, k, Metric::L2, Pooling::Mean).unwrap();
        for r in &rep.per_sample {
            prop_assert!(r.shared <= k);
            prop_assert_eq!(r.ratio, r.shared as f64 / k as f64);
        }
        let mean = rep.per_sample.iter().map(|r| r.ratio).sum::<f64>() / 12.0;
        prop_assert_eq!(rep.average, mean);
    }
}
