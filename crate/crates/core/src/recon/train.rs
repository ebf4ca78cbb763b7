//! Mini-batch Adam training with early stopping on validation loss.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::loss::check_compatible;
use super::model::{squared_error, Gradients, ModelConfig, ReconstructionModel};
use crate::embstore::{compute_norm_stats, EmbeddingSet, NormStats, Space};
use crate::error::{Error, Result};

/// Samples per parallel gradient chunk. Fixed so the reduction order, and
/// therefore every loss history, is independent of the thread count.
const GRAD_CHUNK: usize = 8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainerConfig {
    pub lr: f64,
    pub dropout: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub seed: u64,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            dropout: 0.1,
            batch_size: 128,
            max_epochs: 30,
            patience: 3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            seed: 0,
        }
    }
}

impl TrainerConfig {
    /// A zero learning rate is accepted and leaves parameters untouched.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad(format!("learning rate {} must be finite and non-negative", self.lr));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if self.batch_size == 0 || self.max_epochs == 0 || self.patience == 0 {
            return bad("batch_size, max_epochs and patience must be at least 1".into());
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || self.eps <= 0.0 {
            return bad(format!(
                "adam parameters out of range: beta1 {}, beta2 {}, eps {}",
                self.beta1, self.beta2, self.eps
            ));
        }
        Ok(())
    }
}

/// Mean per-patch losses for one epoch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters from the epoch with the lowest validation loss.
    pub model: ReconstructionModel,
    pub norms: NormStats,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub stopped_early: bool,
}

/// Adam moment estimates aligned with a model's parameters.
#[derive(Debug, Clone)]
pub struct Adam {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
}

impl Adam {
    pub fn new(model: &ReconstructionModel, cfg: &TrainerConfig) -> Self {
        let zeros: Vec<Vec<f64>> = model.params().iter().map(|p| vec![0.0; p.data.len()]).collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            t: 0,
            lr: cfg.lr,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.eps,
        }
    }

    /// One bias-corrected update; parameters are rounded back to `f32`.
    pub fn step(&mut self, model: &mut ReconstructionModel, grads: &Gradients) {
        self.t += 1;
        if self.lr == 0.0 {
            return;
        }
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        let step = self.lr / c1;
        for (((p, g), m), v) in model
            .params_mut()
            .iter_mut()
            .zip(&grads.0)
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            for (((w, &gi), mi), vi) in p.data.iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                let update = step * *mi / ((*vi / c2).sqrt() + self.eps);
                *w = (*w - update) as f32 as f64;
            }
        }
    }
}

/// Normalized `(input, target)` pairs for every sample of a set.
struct Prepared {
    inputs: Vec<Vec<f64>>,
    targets: Vec<Vec<f64>>,
}

fn prepare(set: &EmbeddingSet, norms: &NormStats) -> Prepared {
    let (inputs, targets) = (0..set.len())
        .into_par_iter()
        .map(|i| {
            (
                norms.normalize(Space::Post, set.sample(Space::Post, i)),
                norms.normalize(Space::Pre, set.sample(Space::Pre, i)),
            )
        })
        .unzip();
    Prepared { inputs, targets }
}

fn round_stats(norms: &mut NormStats) {
    for v in [
        &mut norms.pre_mean,
        &mut norms.pre_std,
        &mut norms.post_mean,
        &mut norms.post_std,
    ] {
        v.iter_mut().for_each(|x| *x = *x as f32 as f64);
    }
}

/// Per-sample dropout stream derived from the run seed and the sample's slot.
fn sample_seed(seed: u64, epoch: usize, step: usize, idx: usize) -> u64 {
    let mut z = seed
        ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ (step as u64).wrapping_mul(0xC2B2_AE3D_27D4_EB4F)
        ^ (idx as u64).wrapping_mul(0x1656_67B1_9E37_79F9);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Summed loss and gradients over `batch`, reduced in a fixed order.
fn batch_gradients(
    model: &ReconstructionModel,
    data: &Prepared,
    batch: &[usize],
    dropout_key: Option<(u64, usize, usize)>,
) -> Result<(f64, Gradients)> {
    let partials = batch
        .par_chunks(GRAD_CHUNK)
        .enumerate()
        .map(|(c, chunk)| {
            let mut grads = Gradients::zeros_like(model);
            let mut loss = 0.0;
            for (j, &i) in chunk.iter().enumerate() {
                let (y, cache) = match dropout_key {
                    Some((seed, epoch, step)) => {
                        let mut rng = ChaCha8Rng::seed_from_u64(sample_seed(seed, epoch, step, c * GRAD_CHUNK + j));
                        model.forward_cached(&data.inputs[i], Some(&mut rng))?
                    }
                    None => model.forward_cached(&data.inputs[i], None::<&mut ChaCha8Rng>)?,
                };
                let (l, dy) = squared_error(&y, &data.targets[i]);
                loss += l;
                model.backward(&cache, &dy, &mut grads);
            }
            Ok((loss, grads))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut iter = partials.into_iter();
    let (mut loss, mut grads) = iter.next().unwrap_or_else(|| (0.0, Gradients::zeros_like(model)));
    for (l, g) in iter {
        loss += l;
        grads.add_assign(&g);
    }
    Ok((loss, grads))
}

/// Evaluation-mode mean per-patch loss.
fn mean_patch_loss(model: &ReconstructionModel, data: &Prepared) -> Result<f64> {
    let total: f64 = data
        .inputs
        .par_iter()
        .zip(&data.targets)
        .map(|(x, t)| Ok(squared_error(&model.forward_slice(x)?, t).0))
        .collect::<Result<Vec<f64>>>()?
        .into_iter()
        .sum();
    Ok(total / (data.inputs.len() * model.config().s_out) as f64)
}

/// Builds a freshly initialised model from `model_config` and trains it.
/// Normalization statistics come from `train_set`.
pub fn train(
    train_set: &EmbeddingSet,
    val_set: &EmbeddingSet,
    model_config: ModelConfig,
    cfg: &TrainerConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let mut model_config = model_config;
    model_config.dropout = cfg.dropout;
    let model = ReconstructionModel::init(model_config, cfg.seed)?;
    let mut norms = compute_norm_stats(train_set);
    round_stats(&mut norms);
    train_model(model, train_set, val_set, norms, cfg)
}

/// Trains an existing model. The trainer's dropout rate replaces the model's.
pub fn train_model(
    mut model: ReconstructionModel,
    train_set: &EmbeddingSet,
    val_set: &EmbeddingSet,
    norms: NormStats,
    cfg: &TrainerConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    check_compatible(&model, train_set)?;
    check_compatible(&model, val_set)?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::TooFewSamples {
            needed: 1,
            got: train_set.len().min(val_set.len()),
        });
    }
    model.set_dropout(cfg.dropout)?;
    let train_data = prepare(train_set, &norms);
    let val_data = prepare(val_set, &norms);
    let patches = model.config().s_out as f64;
    let mut adam = Adam::new(&model, cfg);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let mut history = Vec::with_capacity(cfg.max_epochs);
    let mut best = (f64::INFINITY, 0usize, model.clone());
    let mut stale = 0;
    let mut stopped_early = false;
    for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut shuffle_rng);
        let mut epoch_loss = 0.0;
        for (step, batch) in order.chunks(cfg.batch_size).enumerate() {
            let key = (cfg.dropout > 0.0).then_some((cfg.seed, epoch, step));
            let (loss, mut grads) = batch_gradients(&model, &train_data, batch, key)?;
            if !loss.is_finite() {
                return Err(Error::Diverged { epoch, loss });
            }
            epoch_loss += loss;
            grads.scale(1.0 / (batch.len() as f64 * patches));
            adam.step(&mut model, &grads);
        }
        let train_loss = epoch_loss / (train_set.len() as f64 * patches);
        let val_loss = mean_patch_loss(&model, &val_data)?;
        if !val_loss.is_finite() {
            return Err(Error::Diverged { epoch, loss: val_loss });
        }
        history.push(EpochRecord {
            epoch,
            train_loss,
            val_loss,
        });
        if val_loss < best.0 {
            best = (val_loss, epoch, model.clone());
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.patience {
                stopped_early = epoch < cfg.max_epochs;
                break;
            }
        }
    }
    let (best_val_loss, best_epoch, model) = best;
    Ok(TrainOutcome {
        model,
        norms,
        history,
        best_epoch,
        best_val_loss,
        stopped_early,
    })
}

/// Writes the loss history as `epoch,train_loss,val_loss`.
pub fn write_history(history: &[EpochRecord], path: impl AsRef<Path>) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["epoch", "train_loss", "val_loss"])?;
    for r in history {
        w.write_record([
            r.epoch.to_string(),
            format!("{:?}", r.train_loss),
            format!("{:?}", r.val_loss),
        ])?;
    }
    w.flush().map_err(Error::Io)?;
    Ok(())
}

pub fn read_history(path: impl AsRef<Path>) -> Result<Vec<EpochRecord>> {
    let mut r = csv::Reader::from_path(path)?;
    let mut out = Vec::new();
    for rec in r.deserialize() {
        out.push(rec?);
    }
    Ok(out)
}
