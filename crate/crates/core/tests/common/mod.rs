#![allow(dead_code)]

use connlens::embstore::{EmbeddingSet, SetDims};
use connlens::recon::ReconstructionModel;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn ids(n: usize) -> Vec<String> {
    (0..n).map(|i| format!("img{i:04}")).collect()
}

/// Random set with a single-column grid (`m1 = s_pre`, `m2 = 1`).
pub fn random_set(n: usize, s_pre: usize, d_pre: usize, s_post: usize, d_post: usize, seed: u64) -> EmbeddingSet {
    let mut r = rng(seed);
    let pre = (0..n * s_pre * d_pre).map(|_| r.random_range(-1.0f32..1.0)).collect();
    let post = (0..n * s_post * d_post).map(|_| r.random_range(-1.0f32..1.0)).collect();
    let dims = SetDims {
        n,
        s_pre,
        d_pre,
        s_post,
        d_post,
        m1: s_pre,
        m2: 1,
    };
    EmbeddingSet::new(ids(n), dims, pre, post).unwrap()
}

pub fn uniform_vec(r: &mut ChaCha8Rng, len: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..len).map(|_| r.random_range(lo..hi)).collect()
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-300)
}

/// Central difference with step `h`, refined by one Richardson step against `h/2`.
pub fn central_difference(mut f: impl FnMut(f64) -> f64, x: f64, h: f64) -> f64 {
    let mut d = |h: f64| (f(x + h) - f(x - h)) / (2.0 * h);
    let coarse = d(h);
    let fine = d(h / 2.0);
    (4.0 * fine - coarse) / 3.0
}

/// Fraction of coordinates whose analytic gradient agrees with a finite
/// difference (step 1e-3) to relative error below 1e-4, and the coordinate count.
pub fn gradient_agreement(model: &ReconstructionModel, batch: &[(Vec<f64>, Vec<f64>)]) -> (f64, usize) {
    let pairs: Vec<(&[f64], &[f64])> = batch.iter().map(|(x, t)| (x.as_slice(), t.as_slice())).collect();
    let (_, grads) = model.loss_and_gradients(&pairs).unwrap();
    let mut probe = model.clone();
    let mut ok = 0;
    let mut total = 0;
    for (pi, g) in grads.0.iter().enumerate() {
        for (j, &analytic) in g.iter().enumerate() {
            let orig = probe.params()[pi].data[j];
            let numeric = central_difference(
                |v| {
                    probe.params_mut()[pi].data[j] = v;
                    probe.loss_and_gradients(&pairs).unwrap().0
                },
                orig,
                1e-3,
            );
            probe.params_mut()[pi].data[j] = orig;
            let denom = analytic.abs().max(numeric.abs());
            if denom < 1e-8 || (analytic - numeric).abs() / denom < 1e-4 {
                ok += 1;
            }
            total += 1;
        }
    }
    (ok as f64 / total as f64, total)
}
