//! Linear alignment baseline: PCA the pooled post-projection vectors down to the
//! pre-projection width, then fit the orthogonal map that best aligns them.

use serde::{Deserialize, Serialize};

use crate::embstore::{mean_pool, EmbeddingSet, Space};
use crate::error::{Error, Result};
use crate::linalg::{svd, Matrix};

/// Fitted principal components.
#[derive(Debug, Clone)]
pub struct Pca {
    pub mean: Vec<f64>,
    /// `D × target_dim`, orthonormal columns.
    pub basis: Matrix,
    /// Population variance along each retained component, non-increasing.
    pub variances: Vec<f64>,
    /// Sum of per-dimension population variances of the input.
    pub total_variance: f64,
}

impl Pca {
    pub fn retained_variance(&self) -> f64 {
        self.variances.iter().sum()
    }

    pub fn residual_variance(&self) -> f64 {
        self.total_variance - self.retained_variance()
    }

    /// Projects rows of `data` (centred with the fitted mean) onto the basis.
    pub fn transform(&self, data: &Matrix) -> Result<Matrix> {
        if data.cols() != self.mean.len() {
            return Err(Error::DimMismatch(format!(
                "pca fitted on {} dims, got {}",
                self.mean.len(),
                data.cols()
            )));
        }
        let mut centered = data.clone();
        for r in 0..centered.rows() {
            for (v, m) in centered.row_mut(r).iter_mut().zip(&self.mean) {
                *v -= m;
            }
        }
        centered.matmul(&self.basis)
    }
}

/// Principal components of mean-centred `data` (N × D), keeping `target_dim`.
///
/// Sign convention: the largest-magnitude entry of each component is positive.
pub fn pca_fit(data: &Matrix, target_dim: usize) -> Result<Pca> {
    let (n, d) = (data.rows(), data.cols());
    if n < 2 {
        return Err(Error::TooFewSamples { needed: 2, got: n });
    }
    let max = (n - 1).min(d);
    if target_dim == 0 || target_dim > max {
        return Err(Error::TargetDimTooLarge {
            target: target_dim,
            max,
        });
    }
    let (centered, mean) = data.centered();
    let total_variance = centered.as_slice().iter().map(|v| v * v).sum::<f64>() / n as f64;
    let dec = svd(&centered)?;
    let mut basis = Matrix::zeros(d, target_dim);
    let mut variances = Vec::with_capacity(target_dim);
    for c in 0..target_dim {
        let col = dec.v.column(c);
        let pivot = col.iter().enumerate().fold(
            (0, 0.0f64),
            |best, (i, &v)| {
                if v.abs() > best.1.abs() {
                    (i, v)
                } else {
                    best
                }
            },
        );
        let sign = if pivot.1 < 0.0 { -1.0 } else { 1.0 };
        for (r, v) in col.iter().enumerate() {
            basis[(r, c)] = sign * v;
        }
        variances.push(dec.singular_values[c].powi(2) / n as f64);
    }
    Ok(Pca {
        mean,
        basis,
        variances,
        total_variance,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ErrorSummary {
    pub mean: f64,
    pub std: f64,
    pub min: f64,
    pub max: f64,
}

impl ErrorSummary {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len().max(1) as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        Self {
            mean,
            std: var.sqrt(),
            min: values.iter().copied().fold(f64::INFINITY, f64::min),
            max: values.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        }
    }
}

#[derive(Debug, Clone)]
pub struct AlignmentResult {
    /// `D′ × D′` orthogonal map applied on the right: `T̄ R ≈ X̄`.
    pub rotation: Matrix,
    /// Present when produced by [`align_report`].
    pub pca: Option<Pca>,
    /// Isotropic scale, only for the scaled variant.
    pub scale: Option<f64>,
    /// Row-wise `‖X̄ᵢ − T̄ᵢ R‖₂` on centred inputs.
    pub errors: Vec<f64>,
    pub summary: ErrorSummary,
    /// `‖RᵀR − I‖_F`.
    pub orthogonality_residual: f64,
}

/// Orthogonal Procrustes: the `R` minimizing `‖X̄ − T̄R‖_F` over orthogonal matrices,
/// with both inputs mean-centred first.
pub fn procrustes_fit(x: &Matrix, t: &Matrix) -> Result<AlignmentResult> {
    fit(x, t, false)
}

/// Same as [`procrustes_fit`] plus an isotropic scale on `T̄`.
pub fn procrustes_fit_scaled(x: &Matrix, t: &Matrix) -> Result<AlignmentResult> {
    fit(x, t, true)
}

fn fit(x: &Matrix, t: &Matrix, with_scale: bool) -> Result<AlignmentResult> {
    if x.rows() != t.rows() || x.cols() != t.cols() {
        return Err(Error::DimMismatch(format!(
            "procrustes inputs {}x{} and {}x{}",
            x.rows(),
            x.cols(),
            t.rows(),
            t.cols()
        )));
    }
    let (xc, _) = x.centered();
    let (tc, _) = t.centered();
    // X̄ᵀT̄ = U S Vᵀ, so T̄ᵀX̄ = V S Uᵀ and the maximizer of tr(Rᵀ T̄ᵀ X̄) is V Uᵀ.
    let cross = xc.t_matmul(&tc)?;
    let dec = svd(&cross)?;
    let rotation = dec.v.matmul(&dec.u.transpose())?;
    let scale = if with_scale {
        let denom: f64 = tc.as_slice().iter().map(|v| v * v).sum();
        let s = if denom > 0.0 {
            dec.singular_values.iter().sum::<f64>() / denom
        } else {
            1.0
        };
        Some(s)
    } else {
        None
    };
    let mut mapped = tc.matmul(&rotation)?;
    if let Some(s) = scale {
        mapped = mapped.scale(s);
    }
    let errors = row_distances(&xc, &mapped);
    Ok(AlignmentResult {
        orthogonality_residual: rotation.orthonormality_residual(),
        rotation,
        pca: None,
        scale,
        summary: ErrorSummary::of(&errors),
        errors,
    })
}

/// Row-wise L2 distances between equally shaped matrices.
pub fn row_distances(a: &Matrix, b: &Matrix) -> Vec<f64> {
    (0..a.rows())
        .map(|r| {
            a.row(r)
                .iter()
                .zip(b.row(r))
                .map(|(p, q)| (p - q).powi(2))
                .sum::<f64>()
                .sqrt()
        })
        .collect()
}

/// Mean-pool both spaces, PCA post down to `D′`, then fit the orthogonal map.
pub fn align_report(set: &EmbeddingSet) -> Result<AlignmentResult> {
    let x = mean_pool(set, Space::Pre);
    let post = mean_pool(set, Space::Post);
    let pca = pca_fit(&post, x.cols())?;
    let t = pca.transform(&post)?;
    let mut res = procrustes_fit(&x, &t)?;
    res.pca = Some(pca);
    Ok(res)
}

/// JSON summary of an alignment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignmentReport {
    pub target_dim: usize,
    pub n: usize,
    pub mean: f64,
    pub std: f64,
    pub min: f64,
    pub max: f64,
    pub orthogonality_residual: f64,
    pub units: String,
    pub retained_variance: Option<f64>,
    pub total_variance: Option<f64>,
}

impl AlignmentReport {
    pub fn from_result(res: &AlignmentResult) -> Self {
        Self {
            target_dim: res.rotation.rows(),
            n: res.errors.len(),
            mean: res.summary.mean,
            std: res.summary.std,
            min: res.summary.min,
            max: res.summary.max,
            orthogonality_residual: res.orthogonality_residual,
            units: "per-sample L2 on raw mean-pooled vectors (centred)".into(),
            retained_variance: res.pca.as_ref().map(Pca::retained_variance),
            total_variance: res.pca.as_ref().map(|p| p.total_variance),
        }
    }
}
