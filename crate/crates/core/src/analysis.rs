//! Statistics tying per-sample losses to downstream behaviour.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{Error, Result};
use crate::pnm;
use crate::recon::PatchLossMap;

/// Below this many samples the p-value comes from permutations.
pub const PERMUTATION_THRESHOLD: usize = 20;
/// Permutation budget; exhaustive enumeration is used when `n!` fits inside it.
pub const PERMUTATION_SAMPLES: usize = 100_000;
pub const DEFAULT_PERMUTATION_SEED: u64 = 0x5eed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PValueMethod {
    TApprox,
    ExactPermutation,
    SampledPermutation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationResult {
    pub rho: f64,
    pub p: f64,
    pub n: usize,
    pub method: PValueMethod,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub labels: Option<(String, String)>,
}

/// 1-based ranks with ties replaced by their average rank.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        // positions i..=j (0-based) share rank mean of (i+1)..=(j+1)
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &idx in &order[i..=j] {
            ranks[idx] = avg;
        }
        i = j + 1;
    }
    ranks
}

fn centered(v: &[f64]) -> Vec<f64> {
    let mean = v.iter().sum::<f64>() / v.len() as f64;
    v.iter().map(|x| x - mean).collect()
}

fn check_inputs(xs: &[f64], ys: &[f64]) -> Result<()> {
    if xs.len() != ys.len() {
        return Err(Error::LengthMismatch(xs.len(), ys.len()));
    }
    if xs.len() < 3 {
        return Err(Error::TooFewSamples {
            needed: 3,
            got: xs.len(),
        });
    }
    if let Some(i) = xs.iter().chain(ys).position(|v| !v.is_finite()) {
        return Err(Error::NonFiniteRow(i % xs.len()));
    }
    Ok(())
}

/// Spearman's ρ without a p-value.
pub fn spearman_rho(xs: &[f64], ys: &[f64]) -> Result<f64> {
    check_inputs(xs, ys)?;
    let (cx, cy) = (centered(&average_ranks(xs)), centered(&average_ranks(ys)));
    rho_from_centered(&cx, &cy)
}

fn rho_from_centered(cx: &[f64], cy: &[f64]) -> Result<f64> {
    let sxx: f64 = cx.iter().map(|v| v * v).sum();
    let syy: f64 = cy.iter().map(|v| v * v).sum();
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::ConstantInput);
    }
    let sxy: f64 = cx.iter().zip(cy).map(|(a, b)| a * b).sum();
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// Spearman's ρ with a two-sided p-value, using the default permutation seed.
pub fn spearman(xs: &[f64], ys: &[f64]) -> Result<CorrelationResult> {
    spearman_seeded(xs, ys, DEFAULT_PERMUTATION_SEED)
}

pub fn spearman_seeded(xs: &[f64], ys: &[f64], seed: u64) -> Result<CorrelationResult> {
    check_inputs(xs, ys)?;
    let n = xs.len();
    let cx = centered(&average_ranks(xs));
    let cy = centered(&average_ranks(ys));
    let rho = rho_from_centered(&cx, &cy)?;
    let (p, method) = if n >= PERMUTATION_THRESHOLD {
        (t_approx_p(rho, n), PValueMethod::TApprox)
    } else {
        permutation_p(&cx, &cy, rho, seed)
    };
    Ok(CorrelationResult {
        rho,
        p: p.clamp(0.0, 1.0),
        n,
        method,
        labels: None,
    })
}

fn t_approx_p(rho: f64, n: usize) -> f64 {
    let denom = 1.0 - rho * rho;
    if denom <= 0.0 {
        return 0.0;
    }
    let t = rho * ((n - 2) as f64 / denom).sqrt();
    let dist = StudentsT::new(0.0, 1.0, (n - 2) as f64).expect("dof >= 1");
    2.0 * dist.sf(t.abs())
}

fn factorial_within(n: usize, cap: usize) -> Option<usize> {
    (1..=n).try_fold(1usize, |acc, k| acc.checked_mul(k).filter(|&v| v <= cap))
}

/// Two-sided permutation p-value: share of relabellings with |ρ| at least the observed.
fn permutation_p(cx: &[f64], cy: &[f64], rho: f64, seed: u64) -> (f64, PValueMethod) {
    let sxx: f64 = cx.iter().map(|v| v * v).sum();
    let syy: f64 = cy.iter().map(|v| v * v).sum();
    let norm = (sxx * syy).sqrt();
    let threshold = rho.abs() * norm - 1e-9 * norm;
    let stat = |perm: &[f64]| cx.iter().zip(perm).map(|(a, b)| a * b).sum::<f64>().abs();

    if let Some(total) = factorial_within(cx.len(), PERMUTATION_SAMPLES) {
        // Heap's algorithm over every arrangement of cy.
        let mut perm = cy.to_vec();
        let n = perm.len();
        let mut c = vec![0usize; n];
        let mut hits = usize::from(stat(&perm) >= threshold);
        let mut i = 0;
        while i < n {
            if c[i] < i {
                if i % 2 == 0 {
                    perm.swap(0, i);
                } else {
                    perm.swap(c[i], i);
                }
                hits += usize::from(stat(&perm) >= threshold);
                c[i] += 1;
                i = 0;
            } else {
                c[i] = 0;
                i += 1;
            }
        }
        (hits as f64 / total as f64, PValueMethod::ExactPermutation)
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut perm = cy.to_vec();
        let mut hits = 0usize;
        for _ in 0..PERMUTATION_SAMPLES {
            perm.shuffle(&mut rng);
            hits += usize::from(stat(&perm) >= threshold);
        }
        (
            (hits + 1) as f64 / (PERMUTATION_SAMPLES + 1) as f64,
            PValueMethod::SampledPermutation,
        )
    }
}

/// External per-sample scores keyed by id.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ScoreTable {
    pub kind: String,
    pub scores: BTreeMap<String, f64>,
}

impl ScoreTable {
    pub fn new(kind: impl Into<String>) -> Self {
        Self {
            kind: kind.into(),
            scores: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, id: impl Into<String>, score: f64) -> Result<()> {
        let id = id.into();
        if !score.is_finite() {
            return Err(Error::Parse(format!("score for {id:?} is not finite")));
        }
        if self.scores.insert(id.clone(), score).is_some() {
            return Err(Error::DuplicateId(id));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    /// Reads an `id,score` CSV; a header row is skipped when its score column is not numeric.
    pub fn read_csv(path: impl AsRef<Path>, kind: impl Into<String>) -> Result<Self> {
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(false)
            .trim(csv::Trim::All)
            .from_path(path.as_ref())?;
        let mut table = Self::new(kind);
        for (i, rec) in reader.records().enumerate() {
            let rec = rec?;
            if rec.len() != 2 {
                return Err(Error::Parse(format!("scores row {}: expected id,score", i + 1)));
            }
            match rec[1].parse::<f64>() {
                Ok(v) => table.insert(&rec[0], v)?,
                Err(_) if i == 0 => continue,
                Err(e) => return Err(Error::Parse(format!("scores row {}: {e}", i + 1))),
            }
        }
        Ok(table)
    }
}

/// `(loss, score)` pairs for ids present on both sides, in loss order, plus the
/// count of ids present on only one side.
fn join(losses: &[(String, f64)], scores: &ScoreTable) -> (Vec<(String, f64, f64)>, usize) {
    let joined: Vec<(String, f64, f64)> = losses
        .iter()
        .filter_map(|(id, l)| scores.scores.get(id).map(|s| (id.clone(), *l, *s)))
        .collect();
    let dropped = (losses.len() - joined.len()) + (scores.len() - joined.len());
    (joined, dropped)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossScoreCorrelation {
    #[serde(flatten)]
    pub result: CorrelationResult,
    pub dropped: usize,
}

pub fn correlate_loss_scores(losses: &[(String, f64)], scores: &ScoreTable) -> Result<LossScoreCorrelation> {
    let (joined, dropped) = join(losses, scores);
    if joined.len() < 3 {
        return Err(Error::InsufficientOverlap {
            overlap: joined.len(),
            needed: 3,
        });
    }
    let xs: Vec<f64> = joined.iter().map(|j| j.1).collect();
    let ys: Vec<f64> = joined.iter().map(|j| j.2).collect();
    let mut result = spearman(&xs, &ys)?;
    result.labels = Some(("loss".into(), scores.kind.clone()));
    Ok(LossScoreCorrelation { result, dropped })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuartileComparison {
    pub high_loss_mean_score: f64,
    pub low_loss_mean_score: f64,
    /// Largest loss inside the low-loss group.
    pub low_cutoff: f64,
    /// Smallest loss inside the high-loss group.
    pub high_cutoff: f64,
    pub group_size: usize,
    pub n: usize,
    pub low_ids: Vec<String>,
    pub high_ids: Vec<String>,
}

/// Mean score of the 25% lowest-loss and 25% highest-loss samples.
///
/// Group size is the nearest-rank count `⌈n/4⌉`; samples are ranked by loss,
/// then id, so tied losses fall on whichever side their rank lands.
pub fn quartile_compare(losses: &[(String, f64)], scores: &ScoreTable) -> Result<QuartileComparison> {
    let (mut joined, _) = join(losses, scores);
    let n = joined.len();
    if n < 8 {
        return Err(Error::TooFewSamples { needed: 8, got: n });
    }
    joined.sort_by(|a, b| a.1.total_cmp(&b.1).then_with(|| a.0.cmp(&b.0)));
    let m = n.div_ceil(4);
    let low = &joined[..m];
    let high = &joined[n - m..];
    let mean = |g: &[(String, f64, f64)]| g.iter().map(|x| x.2).sum::<f64>() / g.len() as f64;
    Ok(QuartileComparison {
        high_loss_mean_score: mean(high),
        low_loss_mean_score: mean(low),
        low_cutoff: low[m - 1].1,
        high_cutoff: high[0].1,
        group_size: m,
        n,
        low_ids: low.iter().map(|x| x.0.clone()).collect(),
        high_ids: high.iter().map(|x| x.0.clone()).collect(),
    })
}

/// Binary patch grid, row-major `m1 × m2`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskGrid {
    pub m1: usize,
    pub m2: usize,
    pub cells: Vec<bool>,
}

impl MaskGrid {
    pub fn new(m1: usize, m2: usize, cells: Vec<bool>) -> Result<Self> {
        if cells.len() != m1 * m2 {
            return Err(Error::DimMismatch(format!(
                "mask has {} cells for a {m1}x{m2} grid",
                cells.len()
            )));
        }
        Ok(Self { m1, m2, cells })
    }

    /// Patch-resolution grid from a gray image. If the image already has `m2 × m1`
    /// pixels each pixel is a patch; otherwise a patch is relevant when at least
    /// `threshold` of its pixels are non-zero.
    pub fn from_gray(img: &pnm::GrayImage, m1: usize, m2: usize, threshold: f64) -> Result<Self> {
        let (w, h) = (img.width, img.height);
        if w == m2 && h == m1 {
            return Self::new(m1, m2, img.data.iter().map(|&v| v > 0).collect());
        }
        if w < m2 || h < m1 {
            return Err(Error::DimMismatch(format!(
                "mask image {w}x{h} is smaller than the {m1}x{m2} patch grid"
            )));
        }
        let mut on = vec![0usize; m1 * m2];
        let mut total = vec![0usize; m1 * m2];
        for y in 0..h {
            let row = y * m1 / h;
            for x in 0..w {
                let cell = row * m2 + x * m2 / w;
                total[cell] += 1;
                on[cell] += usize::from(img.data[y * w + x] > 0);
            }
        }
        let cells = on
            .iter()
            .zip(&total)
            .map(|(&a, &t)| a as f64 >= threshold * t as f64)
            .collect();
        Self::new(m1, m2, cells)
    }

    /// `m1` lines of `m2` comma-separated 0/1 values.
    pub fn parse_csv(text: &str) -> Result<Self> {
        let mut cells = Vec::new();
        let mut m1 = 0;
        let mut m2 = None;
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty()) {
            let row: Vec<bool> = line
                .split(',')
                .map(|v| match v.trim() {
                    "0" => Ok(false),
                    "1" => Ok(true),
                    other => Err(Error::Parse(format!("mask value {other:?} is not 0 or 1"))),
                })
                .collect::<Result<_>>()?;
            if *m2.get_or_insert(row.len()) != row.len() {
                return Err(Error::DimMismatch("ragged mask csv".into()));
            }
            cells.extend(row);
            m1 += 1;
        }
        Self::new(m1, m2.unwrap_or(0), cells)
    }
}

/// Answer-relevant patch masks keyed by sample id.
#[derive(Debug, Clone, Default)]
pub struct MaskSet {
    pub masks: HashMap<String, MaskGrid>,
}

impl MaskSet {
    /// Loads every `<id>.pgm` / `<id>.csv` in `dir`, rasterized to `m1 × m2`.
    pub fn load_dir(dir: impl AsRef<Path>, m1: usize, m2: usize, threshold: f64) -> Result<Self> {
        let dir = dir.as_ref();
        let mut masks = HashMap::new();
        let mut entries: Vec<_> = fs::read_dir(dir)
            .map_err(|source| Error::File {
                path: dir.to_path_buf(),
                source,
            })?
            .collect::<std::result::Result<_, _>>()?;
        entries.sort_by_key(|e| e.path());
        for entry in entries {
            let path = entry.path();
            let (Some(stem), Some(ext)) = (
                path.file_stem().and_then(|s| s.to_str()),
                path.extension().and_then(|s| s.to_str()),
            ) else {
                continue;
            };
            let grid = match ext.to_ascii_lowercase().as_str() {
                "pgm" => MaskGrid::from_gray(&pnm::read_pgm(&path)?, m1, m2, threshold)?,
                "csv" => {
                    let text = fs::read_to_string(&path).map_err(|source| Error::File {
                        path: path.clone(),
                        source,
                    })?;
                    MaskGrid::parse_csv(&text)?
                }
                _ => continue,
            };
            if grid.m1 != m1 || grid.m2 != m2 {
                return Err(Error::DimMismatch(format!(
                    "mask {stem:?} is {}x{}, expected {m1}x{m2}",
                    grid.m1, grid.m2
                )));
            }
            masks.insert(stem.to_owned(), grid);
        }
        Ok(Self { masks })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskSplit {
    pub id: String,
    pub relevant_count: usize,
    pub irrelevant_count: usize,
    pub relevant_mean_loss: Option<f64>,
    pub irrelevant_mean_loss: Option<f64>,
    pub relevant_mean_norm_diff: Option<f64>,
    pub irrelevant_mean_norm_diff: Option<f64>,
}

/// Mean patch loss and norm difference inside and outside each sample's mask.
/// Samples without a mask are an error.
pub fn mask_split_loss(maps: &[PatchLossMap], masks: &MaskSet) -> Result<Vec<MaskSplit>> {
    maps.iter()
        .map(|map| {
            let mask = masks
                .masks
                .get(&map.id)
                .ok_or_else(|| Error::UnknownId(map.id.clone()))?;
            if mask.m1 != map.m1 || mask.m2 != map.m2 {
                return Err(Error::DimMismatch(format!(
                    "mask {}x{} vs loss map {}x{} for {:?}",
                    mask.m1, mask.m2, map.m1, map.m2, map.id
                )));
            }
            let mut sums = [[0.0f64; 2]; 2];
            let mut counts = [0usize; 2];
            for (i, &on) in mask.cells.iter().enumerate() {
                let side = usize::from(on);
                counts[side] += 1;
                sums[side][0] += map.sq_error[i];
                sums[side][1] += map.norm_diff[i];
            }
            let avg = |side: usize, what: usize| (counts[side] > 0).then(|| sums[side][what] / counts[side] as f64);
            Ok(MaskSplit {
                id: map.id.clone(),
                relevant_count: counts[1],
                irrelevant_count: counts[0],
                relevant_mean_loss: avg(1, 0),
                irrelevant_mean_loss: avg(0, 0),
                relevant_mean_norm_diff: avg(1, 1),
                irrelevant_mean_norm_diff: avg(0, 1),
            })
        })
        .collect()
}

/// Coordinates `(row, col)` of the `k` highest-loss patches, ties in row-major order.
pub fn top_loss_patches(map: &PatchLossMap, k: usize) -> Result<Vec<(usize, usize)>> {
    top_k_cells(&map.sq_error, map.m2, k)
}

/// Coordinates of the `k` largest values of a row-major grid with `m2` columns, ties in row-major order.
pub fn top_k_cells(values: &[f64], m2: usize, k: usize) -> Result<Vec<(usize, usize)>> {
    if k == 0 || k > values.len() {
        return Err(Error::KOutOfRange { k, max: values.len() });
    }
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    Ok(order[..k].iter().map(|&i| (i / m2, i % m2)).collect())
}
