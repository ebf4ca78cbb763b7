//! Forward and backward kernels on row-major `f64` slices.
//!
//! Every backward accumulates into caller-provided gradient buffers so a batch
//! can sum into one set of gradients.

use serde::{Deserialize, Serialize};

pub const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    /// Tanh approximation of GELU.
    Gelu,
    Relu,
    Identity,
}

impl Activation {
    pub fn tag(self) -> u32 {
        match self {
            Activation::Gelu => 0,
            Activation::Relu => 1,
            Activation::Identity => 2,
        }
    }

    pub fn from_tag(tag: u32) -> Option<Self> {
        match tag {
            0 => Some(Activation::Gelu),
            1 => Some(Activation::Relu),
            2 => Some(Activation::Identity),
            _ => None,
        }
    }
}

impl std::str::FromStr for Activation {
    type Err = crate::Error;
    fn from_str(s: &str) -> crate::Result<Self> {
        match s {
            "gelu" => Ok(Activation::Gelu),
            "relu" => Ok(Activation::Relu),
            "identity" | "linear" => Ok(Activation::Identity),
            other => Err(crate::Error::Parse(format!("unknown activation {other:?}"))),
        }
    }
}

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_C: f64 = 0.044_715;

#[inline]
pub fn activate(act: Activation, z: f64) -> f64 {
    match act {
        Activation::Gelu => {
            let u = SQRT_2_OVER_PI * (z + GELU_C * z * z * z);
            0.5 * z * (1.0 + u.tanh())
        }
        Activation::Relu => z.max(0.0),
        Activation::Identity => z,
    }
}

#[inline]
pub fn activate_grad(act: Activation, z: f64) -> f64 {
    match act {
        Activation::Gelu => {
            let u = SQRT_2_OVER_PI * (z + GELU_C * z * z * z);
            let th = u.tanh();
            let du = SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_C * z * z);
            0.5 * (1.0 + th) + 0.5 * z * (1.0 - th * th) * du
        }
        Activation::Relu => {
            if z > 0.0 {
                1.0
            } else {
                0.0
            }
        }
        Activation::Identity => 1.0,
    }
}

/// `y = x Wᵀ + b` for `rows` input rows; `w` is `out × inp`.
pub fn linear_forward(x: &[f64], w: &[f64], b: &[f64], inp: usize, out: usize) -> Vec<f64> {
    let rows = x.len() / inp;
    let mut y = Vec::with_capacity(rows * out);
    for xr in x.chunks_exact(inp) {
        for (wr, &bias) in w.chunks_exact(inp).zip(b) {
            let mut acc = bias;
            for (a, c) in xr.iter().zip(wr) {
                acc += a * c;
            }
            y.push(acc);
        }
    }
    y
}

/// Accumulates `dW += dyᵀ x`, `db += Σ dy`; returns `dx = dy W` when `need_dx`.
#[allow(clippy::too_many_arguments)]
pub fn linear_backward(
    x: &[f64],
    dy: &[f64],
    w: &[f64],
    inp: usize,
    out: usize,
    dw: &mut [f64],
    db: &mut [f64],
    need_dx: bool,
) -> Vec<f64> {
    let mut dx = if need_dx { vec![0.0; x.len()] } else { Vec::new() };
    for (r, (xr, dyr)) in x.chunks_exact(inp).zip(dy.chunks_exact(out)).enumerate() {
        for (o, &g) in dyr.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            db[o] += g;
            let dwr = &mut dw[o * inp..(o + 1) * inp];
            for (d, &a) in dwr.iter_mut().zip(xr) {
                *d += g * a;
            }
            if need_dx {
                let wr = &w[o * inp..(o + 1) * inp];
                for (d, &c) in dx[r * inp..(r + 1) * inp].iter_mut().zip(wr) {
                    *d += g * c;
                }
            }
        }
    }
    dx
}

/// Saved values for [`layernorm_backward`].
#[derive(Debug, Clone, Default)]
pub struct LnCache {
    pub xhat: Vec<f64>,
    pub inv_std: Vec<f64>,
}

pub fn layernorm_forward(x: &[f64], gamma: &[f64], beta: &[f64]) -> (Vec<f64>, LnCache) {
    let dim = gamma.len();
    let rows = x.len() / dim;
    let mut y = Vec::with_capacity(x.len());
    let mut cache = LnCache {
        xhat: Vec::with_capacity(x.len()),
        inv_std: Vec::with_capacity(rows),
    };
    for xr in x.chunks_exact(dim) {
        let mean = xr.iter().sum::<f64>() / dim as f64;
        let var = xr.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / dim as f64;
        let inv = 1.0 / (var + LN_EPS).sqrt();
        cache.inv_std.push(inv);
        for ((&v, g), bta) in xr.iter().zip(gamma).zip(beta) {
            let xh = (v - mean) * inv;
            cache.xhat.push(xh);
            y.push(xh * g + bta);
        }
    }
    (y, cache)
}

pub fn layernorm_backward(
    dy: &[f64],
    cache: &LnCache,
    gamma: &[f64],
    dgamma: &mut [f64],
    dbeta: &mut [f64],
) -> Vec<f64> {
    let dim = gamma.len();
    let mut dx = Vec::with_capacity(dy.len());
    let mut dxhat = vec![0.0; dim];
    for ((dyr, xh), &inv) in dy
        .chunks_exact(dim)
        .zip(cache.xhat.chunks_exact(dim))
        .zip(&cache.inv_std)
    {
        let mut mean_d = 0.0;
        let mut mean_dx = 0.0;
        for j in 0..dim {
            dgamma[j] += dyr[j] * xh[j];
            dbeta[j] += dyr[j];
            dxhat[j] = dyr[j] * gamma[j];
            mean_d += dxhat[j];
            mean_dx += dxhat[j] * xh[j];
        }
        mean_d /= dim as f64;
        mean_dx /= dim as f64;
        for j in 0..dim {
            dx.push(inv * (dxhat[j] - mean_d - xh[j] * mean_dx));
        }
    }
    dx
}

/// Saved values for [`attention_backward`]; `probs` holds one `s × s` matrix per head.
#[derive(Debug, Clone, Default)]
pub struct AttnCache {
    pub probs: Vec<f64>,
}

/// Multi-head scaled dot-product self-attention over pre-projected `q, k, v` (`s × width`).
pub fn attention_forward(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    s: usize,
    width: usize,
    heads: usize,
) -> (Vec<f64>, AttnCache) {
    let dh = width / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut out = vec![0.0; s * width];
    let mut probs = vec![0.0; heads * s * s];
    for h in 0..heads {
        let off = h * dh;
        let p = &mut probs[h * s * s..(h + 1) * s * s];
        for i in 0..s {
            let qi = &q[i * width + off..i * width + off + dh];
            let row = &mut p[i * s..(i + 1) * s];
            let mut max = f64::NEG_INFINITY;
            for (j, r) in row.iter_mut().enumerate() {
                let kj = &k[j * width + off..j * width + off + dh];
                *r = qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() * scale;
                max = max.max(*r);
            }
            let mut sum = 0.0;
            for r in row.iter_mut() {
                *r = (*r - max).exp();
                sum += *r;
            }
            for r in row.iter_mut() {
                *r /= sum;
            }
            let oi = &mut out[i * width + off..i * width + off + dh];
            for (j, &pij) in row.iter().enumerate() {
                let vj = &v[j * width + off..j * width + off + dh];
                for (o, &vv) in oi.iter_mut().zip(vj) {
                    *o += pij * vv;
                }
            }
        }
    }
    (out, AttnCache { probs })
}

/// Returns `(dq, dk, dv)`.
#[allow(clippy::too_many_arguments)]
pub fn attention_backward(
    dout: &[f64],
    q: &[f64],
    k: &[f64],
    v: &[f64],
    cache: &AttnCache,
    s: usize,
    width: usize,
    heads: usize,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let dh = width / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut dq = vec![0.0; s * width];
    let mut dk = vec![0.0; s * width];
    let mut dv = vec![0.0; s * width];
    let mut dp = vec![0.0; s];
    for h in 0..heads {
        let off = h * dh;
        let p = &cache.probs[h * s * s..(h + 1) * s * s];
        for i in 0..s {
            let doi = &dout[i * width + off..i * width + off + dh];
            let prow = &p[i * s..(i + 1) * s];
            // dP_ij = dO_i · V_j ; dV_j += P_ij dO_i
            for j in 0..s {
                let vj = &v[j * width + off..j * width + off + dh];
                dp[j] = doi.iter().zip(vj).map(|(a, b)| a * b).sum();
                let dvj = &mut dv[j * width + off..j * width + off + dh];
                for (d, &g) in dvj.iter_mut().zip(doi) {
                    *d += prow[j] * g;
                }
            }
            let dot: f64 = prow.iter().zip(&dp).map(|(a, b)| a * b).sum();
            let qi = &q[i * width + off..i * width + off + dh];
            for j in 0..s {
                let ds = prow[j] * (dp[j] - dot) * scale;
                if ds == 0.0 {
                    continue;
                }
                let kj = &k[j * width + off..j * width + off + dh];
                let dqi = &mut dq[i * width + off..i * width + off + dh];
                for (d, &kk) in dqi.iter_mut().zip(kj) {
                    *d += ds * kk;
                }
                let dkj = &mut dk[j * width + off..j * width + off + dh];
                for (d, &qq) in dkj.iter_mut().zip(qi) {
                    *d += ds * qq;
                }
            }
        }
    }
    (dq, dk, dv)
}

/// Fixed sinusoidal position table, `len × dim`.
pub fn sinusoidal_table(len: usize, dim: usize) -> Vec<f64> {
    let mut table = vec![0.0; len * dim];
    for pos in 0..len {
        for i in 0..dim {
            let pair = (i / 2) as f64;
            let freq = 1.0 / 10000f64.powf(2.0 * pair / dim as f64);
            let angle = pos as f64 * freq;
            table[pos * dim + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    table
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gelu_derivative_matches_difference() {
        for &z in &[-3.0, -0.7, 0.0, 0.4, 2.5] {
            let h = 1e-6;
            let fd = (activate(Activation::Gelu, z + h) - activate(Activation::Gelu, z - h)) / (2.0 * h);
            assert!((fd - activate_grad(Activation::Gelu, z)).abs() < 1e-8);
        }
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let q = [0.1, 0.2, -0.3, 0.5, 1.0, -1.0];
        let (_, cache) = attention_forward(&q, &q, &q, 3, 2, 1);
        for row in cache.probs.chunks(3) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn sinusoid_first_row() {
        let t = sinusoidal_table(2, 4);
        assert_eq!(&t[..4], &[0.0, 1.0, 0.0, 1.0]);
        assert!((t[4] - 1f64.sin()).abs() < 1e-15);
    }

    #[test]
    fn layernorm_zero_mean_unit_var() {
        let (y, _) = layernorm_forward(&[1.0, 2.0, 3.0, 4.0], &[1.0; 4], &[0.0; 4]);
        let mean: f64 = y.iter().sum::<f64>() / 4.0;
        assert!(mean.abs() < 1e-12);
    }
}
