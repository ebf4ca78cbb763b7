//! Per-patch reconstruction loss on normalized embeddings.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::model::ReconstructionModel;
use crate::embstore::{EmbeddingSet, NormStats, Space};
use crate::error::{Error, Result};

/// Loss grids for one sample, row-major over the `m1 × m2` patch grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatchLossMap {
    pub id: String,
    pub m1: usize,
    pub m2: usize,
    /// Squared L2 error of each patch.
    pub sq_error: Vec<f64>,
    /// `‖original‖₂ − ‖reconstructed‖₂` per patch.
    pub norm_diff: Vec<f64>,
    /// Sum of `sq_error`.
    pub total: f64,
}

impl PatchLossMap {
    pub fn new(id: String, m1: usize, m2: usize, sq_error: Vec<f64>, norm_diff: Vec<f64>) -> Self {
        let total = sq_error.iter().sum();
        Self {
            id,
            m1,
            m2,
            sq_error,
            norm_diff,
            total,
        }
    }

    pub fn patches(&self) -> usize {
        self.sq_error.len()
    }

    /// Mean per-patch loss, the per-sample scalar used for correlations.
    pub fn mean(&self) -> f64 {
        if self.sq_error.is_empty() {
            0.0
        } else {
            self.total / self.sq_error.len() as f64
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    /// Sum over all samples and patches.
    pub total: f64,
    pub per_sample: Vec<PatchLossMap>,
}

impl LossReport {
    /// `(id, mean per-patch loss)` pairs in sample order.
    pub fn sample_means(&self) -> Vec<(String, f64)> {
        self.per_sample.iter().map(|m| (m.id.clone(), m.mean())).collect()
    }
}

/// Checks that a model maps `set`'s post space onto its pre space.
pub fn check_compatible(model: &ReconstructionModel, set: &EmbeddingSet) -> Result<()> {
    let c = model.config();
    let d = set.dims();
    if (c.s_in, c.d_in, c.s_out, c.d_out) != (d.s_post, d.d_post, d.s_pre, d.d_pre) {
        return Err(Error::DimMismatch(format!(
            "model maps {}x{} -> {}x{} but the set is {}x{} -> {}x{}",
            c.s_in, c.d_in, c.s_out, c.d_out, d.s_post, d.d_post, d.s_pre, d.d_pre
        )));
    }
    Ok(())
}

fn check_norms(norms: &NormStats, set: &EmbeddingSet) -> Result<()> {
    let d = set.dims();
    if norms.dim(Space::Pre) != d.d_pre || norms.dim(Space::Post) != d.d_post {
        return Err(Error::DimMismatch(format!(
            "normalization stats are {}/{}-dimensional, set is {}/{}",
            norms.dim(Space::Pre),
            norms.dim(Space::Post),
            d.d_pre,
            d.d_post
        )));
    }
    Ok(())
}

fn row_norms(block: &[f64], dim: usize) -> impl Iterator<Item = f64> + '_ {
    block
        .chunks_exact(dim)
        .map(|r| r.iter().map(|v| v * v).sum::<f64>().sqrt())
}

/// Evaluation-mode loss over `subset` (all samples when `None`).
///
/// Errors are measured between normalized targets and reconstructions. With
/// `denormalize_norms`, the norm-difference grid is computed in original units.
pub fn evaluate(
    model: &ReconstructionModel,
    set: &EmbeddingSet,
    norms: &NormStats,
    subset: Option<&[String]>,
    denormalize_norms: bool,
) -> Result<LossReport> {
    check_compatible(model, set)?;
    check_norms(norms, set)?;
    let rows: Vec<usize> = match subset {
        None => (0..set.len()).collect(),
        Some(ids) => ids
            .iter()
            .map(|id| set.index_of(id).ok_or_else(|| Error::UnknownId(id.clone())))
            .collect::<Result<_>>()?,
    };
    let (m1, m2) = set.grid();
    let d_pre = set.dims().d_pre;
    let per_sample = rows
        .par_iter()
        .map(|&i| {
            let input = norms.normalize(Space::Post, set.sample(Space::Post, i));
            let target = norms.normalize(Space::Pre, set.sample(Space::Pre, i));
            let recon = model.forward_slice(&input)?;
            let sq_error: Vec<f64> = target
                .chunks_exact(d_pre)
                .zip(recon.chunks_exact(d_pre))
                .map(|(t, r)| t.iter().zip(r).map(|(a, b)| (a - b) * (a - b)).sum())
                .collect();
            let norm_diff = if denormalize_norms {
                let t = norms.denormalize(Space::Pre, &target);
                let r = norms.denormalize(Space::Pre, &recon);
                row_norms(&t, d_pre)
                    .zip(row_norms(&r, d_pre))
                    .map(|(a, b)| a - b)
                    .collect()
            } else {
                row_norms(&target, d_pre)
                    .zip(row_norms(&recon, d_pre))
                    .map(|(a, b)| a - b)
                    .collect()
            };
            Ok(PatchLossMap::new(set.ids()[i].clone(), m1, m2, sq_error, norm_diff))
        })
        .collect::<Result<Vec<_>>>()?;
    let total = per_sample.iter().map(|m| m.total).sum();
    Ok(LossReport { total, per_sample })
}

/// Writes `id,mean_loss,total_loss` rows.
pub fn write_sample_losses(report: &LossReport, path: impl AsRef<std::path::Path>) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["id", "mean_loss", "total_loss"])?;
    for m in &report.per_sample {
        w.write_record([m.id.clone(), format!("{:?}", m.mean()), format!("{:?}", m.total)])?;
    }
    w.flush().map_err(Error::Io)?;
    Ok(())
}

/// Reads `id,mean_loss[,...]` rows as `(id, mean_loss)` pairs.
pub fn read_sample_losses(path: impl AsRef<std::path::Path>) -> Result<Vec<(String, f64)>> {
    let mut r = csv::Reader::from_path(path)?;
    let mut out = Vec::new();
    for (line, rec) in r.records().enumerate() {
        let rec = rec?;
        let id = rec
            .get(0)
            .ok_or_else(|| Error::Parse(format!("row {}: missing id", line + 2)))?;
        let loss = rec
            .get(1)
            .and_then(|v| v.trim().parse::<f64>().ok())
            .ok_or_else(|| Error::Parse(format!("row {}: bad loss value", line + 2)))?;
        out.push((id.to_owned(), loss));
    }
    Ok(out)
}
