//! Exact nearest-neighbour search, k-NN overlap ratio and retrieval Recall@k.
//!
//! Search is brute force over pooled vectors. The query itself is always
//! excluded and ties are broken by ascending sample id, so results are
//! reproducible bit for bit.

use std::cmp::Ordering;
use std::collections::{BTreeMap, HashMap, HashSet};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::embstore::{mean_pool, EmbeddingSet, Space};
use crate::error::{Error, Result};
use crate::linalg::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    /// Squared Euclidean distance, smaller is closer.
    L2,
    /// Inner product, larger is closer.
    Ip,
}

impl std::fmt::Display for Metric {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Metric::L2 => "l2",
            Metric::Ip => "ip",
        })
    }
}

impl std::str::FromStr for Metric {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "l2" => Ok(Metric::L2),
            "ip" | "inner-product" | "inner_product" => Ok(Metric::Ip),
            other => Err(Error::Parse(format!("unknown metric {other:?}"))),
        }
    }
}

/// How a sample's sequence becomes an index vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pooling {
    Mean,
    /// Concatenated raw sequence; only defined when both spaces have equal length.
    Flatten,
}

impl std::str::FromStr for Pooling {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mean" => Ok(Pooling::Mean),
            "flatten" => Ok(Pooling::Flatten),
            other => Err(Error::Parse(format!("unknown pooling {other:?}"))),
        }
    }
}

/// Immutable brute-force index.
#[derive(Debug, Clone)]
pub struct NeighborIndex {
    vectors: Matrix,
    metric: Metric,
    normalized: bool,
    /// Position of each row under ascending-id order; used as the tie-break key.
    tie_rank: Vec<usize>,
}

/// Ordered neighbours of one query row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NeighborResult {
    pub query: usize,
    /// `(row, score)`; score is squared distance for L2, similarity for IP.
    pub neighbors: Vec<(usize, f64)>,
}

impl NeighborResult {
    pub fn rows(&self) -> impl Iterator<Item = usize> + '_ {
        self.neighbors.iter().map(|&(r, _)| r)
    }
}

impl NeighborIndex {
    /// Builds an index whose ties break by row position.
    pub fn build(vectors: Matrix, metric: Metric, normalize: bool) -> Result<Self> {
        let tie_rank = (0..vectors.rows()).collect();
        Self::build_with_rank(vectors, metric, normalize, tie_rank)
    }

    /// Builds an index whose ties break by ascending string id.
    pub fn build_with_ids(vectors: Matrix, ids: &[String], metric: Metric, normalize: bool) -> Result<Self> {
        if ids.len() != vectors.rows() {
            return Err(Error::LengthMismatch(ids.len(), vectors.rows()));
        }
        let mut order: Vec<usize> = (0..ids.len()).collect();
        order.sort_by(|&a, &b| ids[a].cmp(&ids[b]));
        let mut tie_rank = vec![0; ids.len()];
        for (rank, row) in order.into_iter().enumerate() {
            tie_rank[row] = rank;
        }
        Self::build_with_rank(vectors, metric, normalize, tie_rank)
    }

    fn build_with_rank(mut vectors: Matrix, metric: Metric, normalize: bool, tie_rank: Vec<usize>) -> Result<Self> {
        if vectors.rows() < 2 {
            return Err(Error::TooFewVectors(vectors.rows()));
        }
        for r in 0..vectors.rows() {
            if vectors.row(r).iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFiniteRow(r));
            }
        }
        if normalize {
            for r in 0..vectors.rows() {
                let row = vectors.row_mut(r);
                let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
                if norm > 0.0 {
                    row.iter_mut().for_each(|v| *v /= norm);
                }
            }
        }
        Ok(Self {
            vectors,
            metric,
            normalized: normalize,
            tie_rank,
        })
    }

    pub fn len(&self) -> usize {
        self.vectors.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.rows() == 0
    }

    pub fn metric(&self) -> Metric {
        self.metric
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    pub fn vectors(&self) -> &Matrix {
        &self.vectors
    }

    fn score(&self, a: usize, b: usize) -> f64 {
        let (x, y) = (self.vectors.row(a), self.vectors.row(b));
        match self.metric {
            Metric::L2 => x
                .iter()
                .zip(y)
                .map(|(p, q)| {
                    let d = p - q;
                    d * d
                })
                .sum(),
            Metric::Ip => x.iter().zip(y).map(|(p, q)| p * q).sum(),
        }
    }

    /// `Less` means `a` ranks ahead of `b`.
    fn rank_cmp(&self, a: &(usize, f64), b: &(usize, f64)) -> Ordering {
        let by_score = match self.metric {
            Metric::L2 => a.1.total_cmp(&b.1),
            Metric::Ip => b.1.total_cmp(&a.1),
        };
        by_score.then_with(|| self.tie_rank[a.0].cmp(&self.tie_rank[b.0]))
    }

    /// Exact top-`k` neighbours of `query`, query excluded.
    pub fn knn(&self, query: usize, k: usize) -> Result<NeighborResult> {
        let n = self.len();
        if query >= n {
            return Err(Error::RowOutOfRange { row: query, n });
        }
        if k == 0 || k > n - 1 {
            return Err(Error::KOutOfRange { k, max: n - 1 });
        }
        let mut scored: Vec<(usize, f64)> = (0..n)
            .filter(|&j| j != query)
            .map(|j| (j, self.score(query, j)))
            .collect();
        if k < scored.len() {
            scored.select_nth_unstable_by(k - 1, |a, b| self.rank_cmp(a, b));
            scored.truncate(k);
        }
        scored.sort_by(|a, b| self.rank_cmp(a, b));
        Ok(NeighborResult {
            query,
            neighbors: scored,
        })
    }

    /// `knn` for every row, in row order. Runs in parallel; output does not depend on scheduling.
    pub fn knn_all(&self, k: usize) -> Result<Vec<NeighborResult>> {
        (0..self.len()).into_par_iter().map(|q| self.knn(q, k)).collect()
    }
}

/// Index vectors for one space of a set.
pub fn pooled_vectors(set: &EmbeddingSet, space: Space, pooling: Pooling) -> Result<Matrix> {
    match pooling {
        Pooling::Mean => Ok(mean_pool(set, space)),
        Pooling::Flatten => {
            let d = set.dims();
            if d.s_pre != d.s_post {
                return Err(Error::InvalidConfig(format!(
                    "flatten pooling needs S_pre = S_post, got {} and {}",
                    d.s_pre, d.s_post
                )));
            }
            let width = d.seq_len(space) * d.dim(space);
            let data = set.tensor(space).iter().map(|&v| v as f64).collect();
            Ok(Matrix::from_vec(set.len(), width, data))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OverlapRecord {
    pub id: String,
    /// Shared neighbours, in `[0, k]`.
    pub shared: usize,
    pub ratio: f64,
}

/// Per-sample and average k-NN overlap between the two spaces.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KnorReport {
    pub k: usize,
    pub metric: Metric,
    pub pooling: Pooling,
    pub per_sample: Vec<OverlapRecord>,
    pub average: f64,
}

/// Fraction of shared members between two neighbour id lists of length `k`.
pub fn overlap_ratio(a: &[usize], b: &[usize]) -> (usize, f64) {
    let set: HashSet<usize> = a.iter().copied().collect();
    let shared = b.iter().filter(|x| set.contains(x)).count();
    (shared, shared as f64 / a.len() as f64)
}

/// KNOR over several `k` values, sharing one neighbour search per space.
pub fn knor_multi(set: &EmbeddingSet, ks: &[usize], metric: Metric, pooling: Pooling) -> Result<Vec<KnorReport>> {
    let kmax = ks.iter().copied().max().unwrap_or(0);
    if set.len() < kmax + 1 || ks.contains(&0) {
        return Err(Error::KOutOfRange {
            k: if ks.contains(&0) { 0 } else { kmax },
            max: set.len().saturating_sub(1),
        });
    }
    let pre = NeighborIndex::build_with_ids(pooled_vectors(set, Space::Pre, pooling)?, set.ids(), metric, false)?;
    let post = NeighborIndex::build_with_ids(pooled_vectors(set, Space::Post, pooling)?, set.ids(), metric, false)?;
    let pre_nn = pre.knn_all(kmax)?;
    let post_nn = post.knn_all(kmax)?;
    let mut reports = Vec::with_capacity(ks.len());
    for &k in ks {
        let per_sample: Vec<OverlapRecord> = pre_nn
            .iter()
            .zip(&post_nn)
            .zip(set.ids())
            .map(|((a, b), id)| {
                let a: Vec<usize> = a.rows().take(k).collect();
                let b: Vec<usize> = b.rows().take(k).collect();
                let (shared, ratio) = overlap_ratio(&a, &b);
                OverlapRecord {
                    id: id.clone(),
                    shared,
                    ratio,
                }
            })
            .collect();
        let average = per_sample.iter().map(|r| r.ratio).sum::<f64>() / per_sample.len() as f64;
        reports.push(KnorReport {
            k,
            metric,
            pooling,
            per_sample,
            average,
        });
    }
    Ok(reports)
}

pub fn knor(set: &EmbeddingSet, k: usize, metric: Metric, pooling: Pooling) -> Result<KnorReport> {
    Ok(knor_multi(set, &[k], metric, pooling)?.remove(0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HitRecord {
    pub id: String,
    /// Rank (1-based) of the first same-class neighbour within the deepest k, if any.
    pub first_hit: Option<usize>,
    pub hits: BTreeMap<usize, bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalReport {
    pub space: Space,
    pub metric: Metric,
    pub recall: BTreeMap<usize, f64>,
    pub per_sample_hits: Vec<HitRecord>,
}

/// Zero-shot retrieval: each sample queries all others in `space`.
pub fn retrieval_eval(
    set: &EmbeddingSet,
    labels: &HashMap<String, String>,
    metric: Metric,
    space: Space,
    ks: &[usize],
) -> Result<RetrievalReport> {
    let classes: Vec<&str> = set
        .ids()
        .iter()
        .map(|id| {
            labels
                .get(id)
                .map(String::as_str)
                .ok_or_else(|| Error::MissingLabel(id.clone()))
        })
        .collect::<Result<_>>()?;
    let kmax = ks.iter().copied().max().unwrap_or(0);
    let index = NeighborIndex::build_with_ids(mean_pool(set, space), set.ids(), metric, false)?;
    let results = index.knn_all(kmax)?;
    let per_sample_hits: Vec<HitRecord> = results
        .iter()
        .map(|res| {
            let own = classes[res.query];
            let first_hit = res.rows().position(|r| classes[r] == own).map(|p| p + 1);
            let hits = ks.iter().map(|&k| (k, first_hit.is_some_and(|h| h <= k))).collect();
            HitRecord {
                id: set.ids()[res.query].clone(),
                first_hit,
                hits,
            }
        })
        .collect();
    let n = per_sample_hits.len() as f64;
    let recall = ks
        .iter()
        .map(|&k| {
            let hits = per_sample_hits.iter().filter(|h| h.hits[&k]).count();
            (k, hits as f64 / n)
        })
        .collect();
    Ok(RetrievalReport {
        space,
        metric,
        recall,
        per_sample_hits,
    })
}

/// Reads a `id,class` CSV (header optional).
pub fn read_labels(path: impl AsRef<Path>) -> Result<HashMap<String, String>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_path(path.as_ref())?;
    let mut labels = HashMap::new();
    for (i, rec) in reader.records().enumerate() {
        let rec = rec?;
        if rec.len() != 2 {
            return Err(Error::Parse(format!("labels row {}: expected id,class", i + 1)));
        }
        if i == 0 && &rec[0] == "id" {
            continue;
        }
        if labels.insert(rec[0].to_owned(), rec[1].to_owned()).is_some() {
            return Err(Error::DuplicateId(rec[0].to_owned()));
        }
    }
    Ok(labels)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embstore::SetDims;

    fn points(rows: &[&[f64]]) -> Matrix {
        Matrix::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>())
    }

    #[test]
    fn one_dimensional_nearest() {
        let idx = NeighborIndex::build(points(&[&[0.0], &[1.0], &[10.0]]), Metric::L2, false).unwrap();
        let res = idx.knn(0, 1).unwrap();
        assert_eq!(res.neighbors, vec![(1, 1.0)]);
    }

    #[test]
    fn ties_break_by_id() {
        let v = points(&[&[0.0], &[1.0], &[1.0], &[-1.0]]);
        let idx = NeighborIndex::build(v.clone(), Metric::L2, false).unwrap();
        assert_eq!(idx.knn(0, 3).unwrap().rows().collect::<Vec<_>>(), vec![1, 2, 3]);
        // Same vectors but ids make row 3 sort first.
        let ids: Vec<String> = ["d", "c", "b", "a"].iter().map(|s| s.to_string()).collect();
        let idx = NeighborIndex::build_with_ids(v, &ids, Metric::L2, false).unwrap();
        assert_eq!(idx.knn(0, 3).unwrap().rows().collect::<Vec<_>>(), vec![3, 2, 1]);
    }

    #[test]
    fn inner_product_orders_descending() {
        let idx = NeighborIndex::build(points(&[&[1.0, 0.0], &[0.0, 1.0], &[0.5, 0.0]]), Metric::Ip, false).unwrap();
        let res = idx.knn(0, 2).unwrap();
        assert_eq!(res.neighbors, vec![(2, 0.5), (1, 0.0)]);
    }

    #[test]
    fn build_errors() {
        assert!(matches!(
            NeighborIndex::build(points(&[&[1.0]]), Metric::L2, false),
            Err(Error::TooFewVectors(1))
        ));
        let err = NeighborIndex::build(points(&[&[1.0], &[f64::NAN]]), Metric::L2, false).unwrap_err();
        assert!(matches!(err, Error::NonFiniteRow(1)));
        let idx = NeighborIndex::build(points(&[&[1.0], &[2.0]]), Metric::L2, false).unwrap();
        assert!(matches!(idx.knn(0, 2), Err(Error::KOutOfRange { k: 2, max: 1 })));
        assert!(matches!(idx.knn(0, 0), Err(Error::KOutOfRange { .. })));
    }

    #[test]
    fn normalized_rows_unit_norm() {
        let idx = NeighborIndex::build(points(&[&[3.0, 4.0], &[0.0, 2.0]]), Metric::Ip, true).unwrap();
        for r in 0..2 {
            let n: f64 = idx.vectors().row(r).iter().map(|v| v * v).sum();
            assert!((n.sqrt() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn overlap_two_of_three() {
        let (shared, ratio) = overlap_ratio(&[0, 1, 2], &[0, 1, 3]);
        assert_eq!(shared, 2);
        assert_eq!(ratio, 2.0 / 3.0);
    }

    fn cluster_set(labels_distinct: bool) -> (EmbeddingSet, HashMap<String, String>) {
        let pre = vec![0.0, 0.1, 10.0, 10.1];
        let post = vec![5.0, 5.2, -50.0, -50.3];
        let dims = SetDims {
            n: 4,
            s_pre: 1,
            d_pre: 1,
            s_post: 1,
            d_post: 1,
            m1: 1,
            m2: 1,
        };
        let ids: Vec<String> = (0..4).map(|i| format!("x{i}")).collect();
        let labels = ids
            .iter()
            .enumerate()
            .map(|(i, id)| {
                let class = if labels_distinct { i } else { i / 2 };
                (id.clone(), class.to_string())
            })
            .collect();
        (EmbeddingSet::new(ids, dims, pre, post).unwrap(), labels)
    }

    #[test]
    fn separable_clusters_recall_one() {
        let (set, labels) = cluster_set(false);
        for space in [Space::Pre, Space::Post] {
            let rep = retrieval_eval(&set, &labels, Metric::L2, space, &[1, 2]).unwrap();
            assert_eq!(rep.recall[&1], 1.0);
        }
    }

    #[test]
    fn distinct_labels_recall_zero() {
        let (set, labels) = cluster_set(true);
        let rep = retrieval_eval(&set, &labels, Metric::L2, Space::Pre, &[1, 3]).unwrap();
        assert!(rep.recall.values().all(|&r| r == 0.0));
    }

    #[test]
    fn missing_label_named() {
        let (set, mut labels) = cluster_set(false);
        labels.remove("x2");
        let err = retrieval_eval(&set, &labels, Metric::L2, Space::Pre, &[1]).unwrap_err();
        assert_eq!(err.to_string(), "missing label for id \"x2\"");
    }

    #[test]
    fn knor_identity_connector() {
        let (set, _) = cluster_set(false);
        let same = EmbeddingSet::new(
            set.ids().to_vec(),
            set.dims(),
            set.tensor(Space::Pre).to_vec(),
            set.tensor(Space::Pre).to_vec(),
        )
        .unwrap();
        let rep = knor(&same, 2, Metric::L2, Pooling::Mean).unwrap();
        assert_eq!(rep.average, 1.0);
        assert!(knor(&same, 4, Metric::L2, Pooling::Mean).is_err());
    }
}
