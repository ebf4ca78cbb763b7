//! Seeded synthetic embedding sets with known ground truth.
//!
//! | kind          | post-projection side                          | property                                  |
//! |---------------|-----------------------------------------------|-------------------------------------------|
//! | `identity`    | copy of pre                                   | KNOR = 1, pre/post payloads equal         |
//! | `orthogonal`  | pre · Q, Q random orthogonal                  | pairwise L2 distances preserved           |
//! | `permuted`    | pre of a randomly permuted sample, mapped     | KNOR ≈ k/(N−1)                            |
//! | `linear-map`  | random Gaussian; pre = post · B, B invertible | zero reconstruction loss attainable       |
//! | `noisy`       | pre (or pre · A) plus Gaussian noise          | geometry degrades with `noise`            |
//! | `compressive` | each 2×2 patch block merged to one token      | `S_post = S_pre / 4`, linearly invertible |
//!
//! Pre-projection patches are standard normal, or, with `classes`, a class
//! centroid (scaled by `class_sep`) plus standard normal noise.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::embstore::{EmbeddingSet, SetDims};
use crate::error::{Error, Result};
use crate::linalg::{orthonormalize_columns, Matrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SynthKind {
    Identity,
    Orthogonal,
    Permuted,
    LinearMap,
    Noisy,
    Compressive,
}

impl SynthKind {
    pub const ALL: [SynthKind; 6] = [
        SynthKind::Identity,
        SynthKind::Orthogonal,
        SynthKind::Permuted,
        SynthKind::LinearMap,
        SynthKind::Noisy,
        SynthKind::Compressive,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SynthKind::Identity => "identity",
            SynthKind::Orthogonal => "orthogonal",
            SynthKind::Permuted => "permuted",
            SynthKind::LinearMap => "linear-map",
            SynthKind::Noisy => "noisy",
            SynthKind::Compressive => "compressive",
        }
    }
}

impl std::fmt::Display for SynthKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for SynthKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        SynthKind::ALL
            .into_iter()
            .find(|k| k.name() == s || k.name().replace('-', "_") == s)
            .ok_or_else(|| Error::Parse(format!("unknown synthetic kind {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub kind: SynthKind,
    pub n: usize,
    pub m1: usize,
    pub m2: usize,
    /// Pre-projection width `D′`.
    pub d_pre: usize,
    /// Post-projection width `D`.
    pub d_post: usize,
    pub classes: Option<usize>,
    pub class_sep: f64,
    /// Standard deviation of the noise added by the `noisy` kind.
    pub noise: f64,
    pub seed: u64,
}

impl SynthSpec {
    pub fn new(kind: SynthKind, n: usize, m1: usize, m2: usize, d_pre: usize, d_post: usize) -> Self {
        Self {
            kind,
            n,
            m1,
            m2,
            d_pre,
            d_post,
            classes: None,
            class_sep: 5.0,
            noise: 1.0,
            seed: 0,
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_classes(mut self, classes: usize) -> Self {
        self.classes = Some(classes);
        self
    }

    pub fn with_noise(mut self, noise: f64) -> Self {
        self.noise = noise;
        self
    }

    pub fn s_pre(&self) -> usize {
        self.m1 * self.m2
    }

    pub fn s_post(&self) -> usize {
        match self.kind {
            SynthKind::Compressive => self.s_pre() / 4,
            _ => self.s_pre(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.n == 0 || self.m1 == 0 || self.m2 == 0 || self.d_pre == 0 || self.d_post == 0 {
            return bad(format!("all synthetic dimensions must be positive: {self:?}"));
        }
        if matches!(self.kind, SynthKind::Identity | SynthKind::Orthogonal) && self.d_pre != self.d_post {
            return bad(format!(
                "{} needs d_pre = d_post, got {} and {}",
                self.kind, self.d_pre, self.d_post
            ));
        }
        if self.kind == SynthKind::LinearMap && self.d_post < self.d_pre {
            return bad(format!(
                "linear-map needs d_post >= d_pre for an invertible map, got {} < {}",
                self.d_post, self.d_pre
            ));
        }
        if self.kind == SynthKind::Compressive {
            if !self.m1.is_multiple_of(2) || !self.m2.is_multiple_of(2) {
                return bad(format!("compressive needs an even grid, got {}x{}", self.m1, self.m2));
            }
            if self.d_post < 4 * self.d_pre {
                return bad(format!(
                    "compressive needs d_post >= 4 d_pre to stay invertible, got {} < {}",
                    self.d_post,
                    4 * self.d_pre
                ));
            }
        }
        if self.classes == Some(0) {
            return bad("classes must be at least 1".into());
        }
        if !(self.noise >= 0.0 && self.class_sep >= 0.0) {
            return bad("noise and class_sep must be non-negative".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct SynthOutput {
    pub set: EmbeddingSet,
    /// `(id, label)` pairs when classes were requested.
    pub labels: Option<Vec<(String, String)>>,
}

fn gaussian_matrix(rows: usize, cols: usize, scale: f64, rng: &mut ChaCha8Rng) -> Matrix {
    let data = (0..rows * cols)
        .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
        .collect();
    Matrix::from_vec(rows, cols, data)
}

/// Haar-like random orthogonal matrix (Gram-Schmidt of a Gaussian matrix).
pub fn random_orthogonal(n: usize, rng: &mut ChaCha8Rng) -> Result<Matrix> {
    loop {
        let g = gaussian_matrix(n, n, 1.0, rng);
        // a rank-deficient draw has probability zero; redraw if it happens
        if let Ok(q) = orthonormalize_columns(&g) {
            return Ok(q);
        }
    }
}

/// Well-conditioned random invertible `n × n` matrix: `Q₁ · diag(s) · Q₂`, `s ∈ [0.5, 2]`.
fn random_invertible(n: usize, rng: &mut ChaCha8Rng) -> Result<Matrix> {
    let q1 = random_orthogonal(n, rng)?;
    let mut q2 = random_orthogonal(n, rng)?;
    for r in 0..n {
        let s: f64 = rng.random_range(0.5..2.0);
        q2.row_mut(r).iter_mut().for_each(|v| *v *= s);
    }
    q1.matmul(&q2)
}

/// Applies `map` (`d_in × d_out`) to every `d_in`-wide row of `block`.
fn map_rows(block: &[f64], map: &Matrix) -> Vec<f64> {
    let (d_in, d_out) = (map.rows(), map.cols());
    let mut out = vec![0.0; block.len() / d_in * d_out];
    for (x, y) in block.chunks_exact(d_in).zip(out.chunks_exact_mut(d_out)) {
        for (i, &xi) in x.iter().enumerate() {
            if xi == 0.0 {
                continue;
            }
            for (yo, &m) in y.iter_mut().zip(map.row(i)) {
                *yo += xi * m;
            }
        }
    }
    out
}

fn to_f32(v: &[f64]) -> Vec<f32> {
    v.iter().map(|&x| x as f32).collect()
}

pub fn generate(spec: &SynthSpec) -> Result<SynthOutput> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (n, s_pre, dp, dq) = (spec.n, spec.s_pre(), spec.d_pre, spec.d_post);
    let width = n.to_string().len();
    let ids: Vec<String> = (0..n).map(|i| format!("s{i:0width$}")).collect();

    let class_of: Option<Vec<usize>> = spec.classes.map(|c| (0..n).map(|i| i % c).collect());
    let centroids = spec.classes.map(|c| gaussian_matrix(c, dp, spec.class_sep, &mut rng));
    let draw_pre = |rng: &mut ChaCha8Rng| -> Vec<f64> {
        let mut pre = gaussian_matrix(n * s_pre, dp, 1.0, rng).into_vec();
        if let (Some(cls), Some(cent)) = (&class_of, &centroids) {
            for (i, sample) in pre.chunks_exact_mut(s_pre * dp).enumerate() {
                let c = cent.row(cls[i]);
                for patch in sample.chunks_exact_mut(dp) {
                    patch.iter_mut().zip(c).for_each(|(v, m)| *v += m);
                }
            }
        }
        pre
    };

    let (pre, post): (Vec<f64>, Vec<f64>) = match spec.kind {
        SynthKind::Identity => {
            let pre = draw_pre(&mut rng);
            (pre.clone(), pre)
        }
        SynthKind::Orthogonal => {
            let pre = draw_pre(&mut rng);
            let q = random_orthogonal(dp, &mut rng)?;
            let post = map_rows(&pre, &q);
            (pre, post)
        }
        SynthKind::Permuted => {
            let pre = draw_pre(&mut rng);
            let mut perm: Vec<usize> = (0..n).collect();
            perm.shuffle(&mut rng);
            let mapped = if dp == dq {
                pre.clone()
            } else {
                map_rows(&pre, &gaussian_matrix(dp, dq, 1.0 / (dp as f64).sqrt(), &mut rng))
            };
            let block = s_pre * dq;
            let mut post = Vec::with_capacity(n * block);
            for &j in &perm {
                post.extend_from_slice(&mapped[j * block..(j + 1) * block]);
            }
            (pre, post)
        }
        SynthKind::LinearMap => {
            // post is drawn first; pre = post · B with B of full column rank
            let post = gaussian_matrix(n * s_pre, dq, 1.0, &mut rng).into_vec();
            let b = if dq == dp {
                random_invertible(dp, &mut rng)?
            } else {
                let q = orthonormalize_columns(&gaussian_matrix(dq, dp, 1.0, &mut rng))?;
                let s = random_invertible(dp, &mut rng)?;
                q.matmul(&s)?
            };
            (map_rows(&post, &b), post)
        }
        SynthKind::Noisy => {
            let pre = draw_pre(&mut rng);
            let mut post = if dp == dq {
                pre.clone()
            } else {
                map_rows(&pre, &gaussian_matrix(dp, dq, 1.0 / (dp as f64).sqrt(), &mut rng))
            };
            post.iter_mut()
                .for_each(|v| *v += spec.noise * rng.sample::<f64, _>(StandardNormal));
            (pre, post)
        }
        SynthKind::Compressive => {
            let pre = draw_pre(&mut rng);
            let w = orthonormalize_columns(&gaussian_matrix(dq, 4 * dp, 1.0, &mut rng))?.transpose();
            let (m1, m2) = (spec.m1, spec.m2);
            let s_post = spec.s_post();
            let mut merged = vec![0.0; n * s_post * 4 * dp];
            for i in 0..n {
                for br in 0..m1 / 2 {
                    for bc in 0..m2 / 2 {
                        let t = i * s_post + br * (m2 / 2) + bc;
                        let dst = &mut merged[t * 4 * dp..(t + 1) * 4 * dp];
                        for (q, (dr, dc)) in [(0, 0), (0, 1), (1, 0), (1, 1)].into_iter().enumerate() {
                            let p = (2 * br + dr) * m2 + 2 * bc + dc;
                            let src = &pre[(i * s_pre + p) * dp..(i * s_pre + p + 1) * dp];
                            dst[q * dp..(q + 1) * dp].copy_from_slice(src);
                        }
                    }
                }
            }
            (pre, map_rows(&merged, &w))
        }
    };

    let dims = SetDims {
        n,
        s_pre,
        d_pre: dp,
        s_post: spec.s_post(),
        d_post: dq,
        m1: spec.m1,
        m2: spec.m2,
    };
    let labels = class_of.map(|cls| {
        ids.iter()
            .zip(cls)
            .map(|(id, c)| (id.clone(), format!("c{c}")))
            .collect()
    });
    let set = EmbeddingSet::new(ids, dims, to_f32(&pre), to_f32(&post))?;
    Ok(SynthOutput { set, labels })
}

/// Writes `id,label` rows.
pub fn write_labels(labels: &[(String, String)], path: impl AsRef<std::path::Path>) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["id", "label"])?;
    for (id, label) in labels {
        w.write_record([id, label])?;
    }
    w.flush().map_err(Error::Io)?;
    Ok(())
}
