//! Reconstruction models mapping a post-projection sequence back to the
//! pre-projection patch grid.
//!
//! * `mlp`: per-token feed-forward stack; needs `S_post = S_pre`.
//! * `seqreg`: tokens are projected to the model width, repeated to `S_pre`
//!   positions by nearest index, summed with sinusoidal positions, passed
//!   through a pre-norm transformer encoder and mapped to `D_pre`.
//!
//! Parameters live in `f64` but are kept `f32`-representable (initialisation
//! and optimiser steps round them), so checkpoints round-trip bit-exactly.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::layers::{self, Activation, AttnCache, LnCache};
use crate::error::{Error, Result};
use crate::linalg::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Arch {
    Mlp,
    Seqreg,
}

impl Arch {
    pub fn tag(self) -> u32 {
        match self {
            Arch::Mlp => 0,
            Arch::Seqreg => 1,
        }
    }

    pub fn from_tag(tag: u32) -> Option<Self> {
        match tag {
            0 => Some(Arch::Mlp),
            1 => Some(Arch::Seqreg),
            _ => None,
        }
    }
}

impl std::str::FromStr for Arch {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mlp" => Ok(Arch::Mlp),
            "seqreg" => Ok(Arch::Seqreg),
            other => Err(Error::Parse(format!("unknown architecture {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub arch: Arch,
    /// Post-projection width `D`.
    pub d_in: usize,
    /// Pre-projection width `D′`.
    pub d_out: usize,
    /// Input sequence length `S_post`.
    pub s_in: usize,
    /// Output sequence length `S_pre`.
    pub s_out: usize,
    /// Hidden widths of the MLP (empty = single linear layer).
    pub hidden: Vec<usize>,
    pub width: usize,
    pub layers: usize,
    pub heads: usize,
    pub ff_dim: usize,
    pub activation: Activation,
    pub dropout: f64,
}

impl ModelConfig {
    pub fn mlp(d_in: usize, d_out: usize, seq: usize, hidden: Vec<usize>) -> Self {
        Self {
            arch: Arch::Mlp,
            d_in,
            d_out,
            s_in: seq,
            s_out: seq,
            hidden,
            width: 0,
            layers: 0,
            heads: 0,
            ff_dim: 0,
            activation: Activation::Gelu,
            dropout: 0.1,
        }
    }

    /// Desk-scale default: 4 layers, 8 heads, feed-forward 4× width.
    pub fn seqreg(d_in: usize, d_out: usize, s_in: usize, s_out: usize, width: usize) -> Self {
        Self {
            arch: Arch::Seqreg,
            d_in,
            d_out,
            s_in,
            s_out,
            hidden: Vec::new(),
            width,
            layers: 4,
            heads: 8,
            ff_dim: 4 * width,
            activation: Activation::Gelu,
            dropout: 0.1,
        }
    }

    /// The 27M-parameter MLP sized for a 576×4096 → 576×1024 connector.
    pub fn preset_mlp_27m() -> Self {
        Self::mlp(4096, 1024, 576, vec![4096, 2048])
    }

    /// 16-layer, 16-head, width-2048 encoder.
    pub fn preset_seqreg_large(d_in: usize, d_out: usize, s_in: usize, s_out: usize) -> Self {
        Self {
            layers: 16,
            heads: 16,
            ..Self::seqreg(d_in, d_out, s_in, s_out, 2048)
        }
    }

    pub fn with_activation(mut self, activation: Activation) -> Self {
        self.activation = activation;
        self
    }

    pub fn with_dropout(mut self, dropout: f64) -> Self {
        self.dropout = dropout;
        self
    }

    pub fn with_depth(mut self, layers: usize, heads: usize, ff_dim: usize) -> Self {
        self.layers = layers;
        self.heads = heads;
        self.ff_dim = ff_dim;
        self
    }

    /// Full layer-width chain of the MLP.
    pub fn mlp_dims(&self) -> Vec<usize> {
        let mut dims = vec![self.d_in];
        dims.extend(&self.hidden);
        dims.push(self.d_out);
        dims
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if self.d_in == 0 || self.d_out == 0 || self.s_in == 0 || self.s_out == 0 {
            return bad(format!("zero-sized model dimension in {self:?}"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        match self.arch {
            Arch::Mlp => {
                if self.s_in != self.s_out {
                    return bad(format!(
                        "mlp needs equal sequence lengths, got {} -> {}",
                        self.s_in, self.s_out
                    ));
                }
                if self.hidden.contains(&0) {
                    return bad("zero-width hidden layer".into());
                }
            }
            Arch::Seqreg => {
                if self.width == 0 || self.layers == 0 || self.heads == 0 || self.ff_dim == 0 {
                    return bad("seqreg needs positive width, layers, heads and ff_dim".into());
                }
                if !self.width.is_multiple_of(self.heads) {
                    return bad(format!("width {} not divisible by {} heads", self.width, self.heads));
                }
            }
        }
        Ok(())
    }

    /// Names and shapes of every parameter tensor, in storage order.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let mut shapes = Vec::new();
        match self.arch {
            Arch::Mlp => {
                let dims = self.mlp_dims();
                for (l, w) in dims.windows(2).enumerate() {
                    shapes.push((format!("mlp.{l}.weight"), vec![w[1], w[0]]));
                    shapes.push((format!("mlp.{l}.bias"), vec![w[1]]));
                }
            }
            Arch::Seqreg => {
                let (h, f) = (self.width, self.ff_dim);
                shapes.push(("in.weight".into(), vec![h, self.d_in]));
                shapes.push(("in.bias".into(), vec![h]));
                for l in 0..self.layers {
                    let p = |n: &str| format!("enc.{l}.{n}");
                    shapes.push((p("ln1.gamma"), vec![h]));
                    shapes.push((p("ln1.beta"), vec![h]));
                    for m in ["q", "k", "v", "o"] {
                        shapes.push((p(&format!("{m}.weight")), vec![h, h]));
                        shapes.push((p(&format!("{m}.bias")), vec![h]));
                    }
                    shapes.push((p("ln2.gamma"), vec![h]));
                    shapes.push((p("ln2.beta"), vec![h]));
                    shapes.push((p("ff1.weight"), vec![f, h]));
                    shapes.push((p("ff1.bias"), vec![f]));
                    shapes.push((p("ff2.weight"), vec![h, f]));
                    shapes.push((p("ff2.bias"), vec![h]));
                }
                shapes.push(("lnf.gamma".into(), vec![h]));
                shapes.push(("lnf.beta".into(), vec![h]));
                shapes.push(("out.weight".into(), vec![self.d_out, h]));
                shapes.push(("out.bias".into(), vec![self.d_out]));
            }
        }
        shapes
    }

    pub fn param_count(&self) -> usize {
        self.param_shapes()
            .iter()
            .map(|(_, s)| s.iter().product::<usize>())
            .sum()
    }
}

/// Warning text when the reconstruction model is smaller than the connector it inverts.
pub fn capacity_warning(config: &ModelConfig, connector_params: Option<usize>) -> Option<String> {
    let conn = connector_params?;
    let ours = config.param_count();
    (ours < conn).then(|| format!("reconstruction model has {ours} parameters, fewer than the connector's {conn}"))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// Gradient buffers aligned with a model's parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients(pub Vec<Vec<f64>>);

impl Gradients {
    pub fn zeros_like(model: &ReconstructionModel) -> Self {
        Self(model.params.iter().map(|p| vec![0.0; p.data.len()]).collect())
    }

    pub fn add_assign(&mut self, other: &Gradients) {
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn scale(&mut self, alpha: f64) {
        self.0.iter_mut().flatten().for_each(|g| *g *= alpha);
    }

    pub fn iter(&self) -> impl Iterator<Item = f64> + '_ {
        self.0.iter().flatten().copied()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReconstructionModel {
    config: ModelConfig,
    pub(crate) params: Vec<Param>,
    positions: Vec<f64>,
}

fn round_f32(v: f64) -> f64 {
    v as f32 as f64
}

impl ReconstructionModel {
    /// All-zero parameters (layer-norm gains included).
    pub fn zeros(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let params = config
            .param_shapes()
            .into_iter()
            .map(|(name, shape)| {
                let len = shape.iter().product();
                Param {
                    name,
                    shape,
                    data: vec![0.0; len],
                }
            })
            .collect();
        Ok(Self::assemble(config, params))
    }

    /// Uniform `±1/√fan_in` weights and biases, unit layer-norm gains.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        let mut model = Self::zeros(config)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        // weights are out × in and each bias directly follows its weight
        let mut fan_in = 1;
        for p in &mut model.params {
            if p.name.ends_with(".gamma") {
                p.data.iter_mut().for_each(|v| *v = 1.0);
                continue;
            }
            if p.name.ends_with(".beta") {
                continue;
            }
            if p.shape.len() == 2 {
                fan_in = p.shape[1];
            }
            let bound = 1.0 / (fan_in as f64).sqrt();
            for v in &mut p.data {
                *v = round_f32(rng.random_range(-bound..bound));
            }
        }
        Ok(model)
    }

    /// Builds a model from explicit tensors, checking names and shapes.
    pub fn from_params(config: ModelConfig, params: Vec<Param>) -> Result<Self> {
        config.validate()?;
        let expected = config.param_shapes();
        if expected.len() != params.len() {
            return Err(Error::DimMismatch(format!(
                "expected {} tensors, got {}",
                expected.len(),
                params.len()
            )));
        }
        for ((name, shape), p) in expected.iter().zip(&params) {
            if name != &p.name || shape != &p.shape || p.data.len() != shape.iter().product::<usize>() {
                return Err(Error::DimMismatch(format!(
                    "tensor {:?} {:?} does not match expected {name:?} {shape:?}",
                    p.name, p.shape
                )));
            }
            if p.data.iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidConfig(format!("tensor {name:?} has non-finite values")));
            }
        }
        Ok(Self::assemble(config, params))
    }

    fn assemble(config: ModelConfig, params: Vec<Param>) -> Self {
        let positions = match config.arch {
            Arch::Seqreg => layers::sinusoidal_table(config.s_out, config.width),
            Arch::Mlp => Vec::new(),
        };
        Self {
            config,
            params,
            positions,
        }
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.data.len()).sum()
    }

    pub fn set_dropout(&mut self, dropout: f64) -> Result<()> {
        if !(0.0..1.0).contains(&dropout) {
            return Err(Error::InvalidConfig(format!("dropout {dropout} outside [0, 1)")));
        }
        self.config.dropout = dropout;
        Ok(())
    }

    /// Rounds every parameter to the nearest `f32`.
    pub fn round_params_to_f32(&mut self) {
        self.params
            .iter_mut()
            .flat_map(|p| p.data.iter_mut())
            .for_each(|v| *v = round_f32(*v));
    }

    fn check_input(&self, len: usize) -> Result<()> {
        let want = self.config.s_in * self.config.d_in;
        if len != want {
            return Err(Error::DimMismatch(format!(
                "model expects {}x{} input ({want} values), got {len}",
                self.config.s_in, self.config.d_in
            )));
        }
        Ok(())
    }

    /// Evaluation-mode forward pass (dropout off): `S_post × D` to `S_pre × D′`.
    pub fn forward(&self, input: &Matrix) -> Result<Matrix> {
        if input.cols() != self.config.d_in || input.rows() != self.config.s_in {
            return Err(Error::DimMismatch(format!(
                "model expects {}x{} input, got {}x{}",
                self.config.s_in,
                self.config.d_in,
                input.rows(),
                input.cols()
            )));
        }
        let out = self.forward_slice(input.as_slice())?;
        Ok(Matrix::from_vec(self.config.s_out, self.config.d_out, out))
    }

    pub fn forward_slice(&self, input: &[f64]) -> Result<Vec<f64>> {
        self.check_input(input.len())?;
        Ok(self.run_forward(input, None::<&mut ChaCha8Rng>).0)
    }

    /// Forward pass keeping intermediates; dropout is applied when `rng` is given.
    pub fn forward_cached<R: Rng>(&self, input: &[f64], rng: Option<&mut R>) -> Result<(Vec<f64>, Cache)> {
        self.check_input(input.len())?;
        Ok(self.run_forward(input, rng))
    }

    fn run_forward<R: Rng>(&self, input: &[f64], rng: Option<&mut R>) -> (Vec<f64>, Cache) {
        let p = if rng.is_some() { self.config.dropout } else { 0.0 };
        match self.config.arch {
            Arch::Mlp => {
                let (y, c) = self.mlp_forward(input, p, rng);
                (y, Cache::Mlp(c))
            }
            Arch::Seqreg => {
                let (y, c) = self.seq_forward(input, p, rng);
                (y, Cache::Seq(Box::new(c)))
            }
        }
    }

    /// Accumulates parameter gradients for upstream gradient `d_out` into `grads`.
    pub fn backward(&self, cache: &Cache, d_out: &[f64], grads: &mut Gradients) {
        match cache {
            Cache::Mlp(c) => self.mlp_backward(c, d_out, grads),
            Cache::Seq(c) => self.seq_backward(c, d_out, grads),
        }
    }

    /// Summed squared error over a batch of `(input, target)` pairs and its exact
    /// gradient with respect to every parameter. Evaluation mode (no dropout).
    pub fn loss_and_gradients(&self, batch: &[(&[f64], &[f64])]) -> Result<(f64, Gradients)> {
        let mut grads = Gradients::zeros_like(self);
        let mut total = 0.0;
        for (x, t) in batch {
            let (y, cache) = self.forward_cached(x, None::<&mut ChaCha8Rng>)?;
            if t.len() != y.len() {
                return Err(Error::DimMismatch(format!(
                    "target has {} values, model emits {}",
                    t.len(),
                    y.len()
                )));
            }
            let (loss, dy) = squared_error(&y, t);
            total += loss;
            self.backward(&cache, &dy, &mut grads);
        }
        Ok((total, grads))
    }
}

/// `Σ (y − t)²` and its gradient `2 (y − t)`.
pub fn squared_error(y: &[f64], t: &[f64]) -> (f64, Vec<f64>) {
    let mut loss = 0.0;
    let dy = y
        .iter()
        .zip(t)
        .map(|(a, b)| {
            let r = a - b;
            loss += r * r;
            2.0 * r
        })
        .collect();
    (loss, dy)
}

/// Intermediates saved by a forward pass.
#[derive(Debug, Clone)]
pub enum Cache {
    Mlp(MlpCache),
    Seq(Box<SeqCache>),
}

#[derive(Debug, Clone, Default)]
pub struct MlpCache {
    inputs: Vec<Vec<f64>>,
    pre_acts: Vec<Vec<f64>>,
    masks: Vec<Option<Vec<f64>>>,
}

fn dropout_mask<R: Rng>(len: usize, p: f64, rng: &mut R) -> Vec<f64> {
    let keep = 1.0 / (1.0 - p);
    (0..len)
        .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep })
        .collect()
}

impl ReconstructionModel {
    fn mlp_forward<R: Rng>(&self, input: &[f64], p: f64, mut rng: Option<&mut R>) -> (Vec<f64>, MlpCache) {
        let dims = self.config.mlp_dims();
        let n_layers = dims.len() - 1;
        let mut cache = MlpCache::default();
        let mut x = input.to_vec();
        for l in 0..n_layers {
            let (w, b) = (&self.params[2 * l].data, &self.params[2 * l + 1].data);
            let z = layers::linear_forward(&x, w, b, dims[l], dims[l + 1]);
            cache.inputs.push(std::mem::take(&mut x));
            if l + 1 == n_layers {
                return (z, cache);
            }
            let mut a: Vec<f64> = z.iter().map(|&v| layers::activate(self.config.activation, v)).collect();
            let mask = match rng.as_deref_mut() {
                Some(r) if p > 0.0 => {
                    let m = dropout_mask(a.len(), p, r);
                    a.iter_mut().zip(&m).for_each(|(v, k)| *v *= k);
                    Some(m)
                }
                _ => None,
            };
            cache.pre_acts.push(z);
            cache.masks.push(mask);
            x = a;
        }
        unreachable!("mlp has at least one layer")
    }

    fn mlp_backward(&self, cache: &MlpCache, d_out: &[f64], grads: &mut Gradients) {
        let dims = self.config.mlp_dims();
        let n_layers = dims.len() - 1;
        let mut dy = d_out.to_vec();
        for l in (0..n_layers).rev() {
            let (gw, rest) = grads.0.split_at_mut(2 * l + 1);
            let dw = &mut gw[2 * l];
            let db = &mut rest[0];
            let dx = layers::linear_backward(
                &cache.inputs[l],
                &dy,
                &self.params[2 * l].data,
                dims[l],
                dims[l + 1],
                dw,
                db,
                l > 0,
            );
            if l == 0 {
                break;
            }
            // back through dropout and the activation of hidden layer l-1
            let z = &cache.pre_acts[l - 1];
            dy = dx;
            if let Some(m) = &cache.masks[l - 1] {
                dy.iter_mut().zip(m).for_each(|(d, k)| *d *= k);
            }
            dy.iter_mut()
                .zip(z)
                .for_each(|(d, &zv)| *d *= layers::activate_grad(self.config.activation, zv));
        }
    }
}

// Parameter indices inside a seqreg model.
const IN_W: usize = 0;
const IN_B: usize = 1;
const PER_LAYER: usize = 16;
const LN1_G: usize = 0;
const LN1_B: usize = 1;
const Q_W: usize = 2;
const Q_B: usize = 3;
const K_W: usize = 4;
const K_B: usize = 5;
const V_W: usize = 6;
const V_B: usize = 7;
const O_W: usize = 8;
const O_B: usize = 9;
const LN2_G: usize = 10;
const LN2_B: usize = 11;
const FF1_W: usize = 12;
const FF1_B: usize = 13;
const FF2_W: usize = 14;
const FF2_B: usize = 15;

#[derive(Debug, Clone, Default)]
struct LayerCache {
    ln1: LnCache,
    a: Vec<f64>,
    q: Vec<f64>,
    k: Vec<f64>,
    v: Vec<f64>,
    attn: AttnCache,
    attn_out: Vec<f64>,
    ln2: LnCache,
    c: Vec<f64>,
    z1: Vec<f64>,
    f: Vec<f64>,
    mask: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Default)]
pub struct SeqCache {
    input: Vec<f64>,
    layers: Vec<LayerCache>,
    lnf: LnCache,
    zf: Vec<f64>,
}

impl ReconstructionModel {
    /// Source token feeding output position `pos` (nearest-index repetition).
    pub fn source_token(&self, pos: usize) -> usize {
        (pos * self.config.s_in / self.config.s_out).min(self.config.s_in - 1)
    }

    fn layer_base(l: usize) -> usize {
        2 + l * PER_LAYER
    }

    fn final_base(&self) -> usize {
        2 + self.config.layers * PER_LAYER
    }

    fn seq_forward<R: Rng>(&self, input: &[f64], p: f64, mut rng: Option<&mut R>) -> (Vec<f64>, SeqCache) {
        let cfg = &self.config;
        let (h, f, s) = (cfg.width, cfg.ff_dim, cfg.s_out);
        let w = |i: usize| -> &[f64] { &self.params[i].data };
        let e = layers::linear_forward(input, w(IN_W), w(IN_B), cfg.d_in, h);
        let mut x = vec![0.0; s * h];
        for pos in 0..s {
            let src = self.source_token(pos);
            let row = &mut x[pos * h..(pos + 1) * h];
            for ((dst, &ev), &pe) in row
                .iter_mut()
                .zip(&e[src * h..(src + 1) * h])
                .zip(&self.positions[pos * h..(pos + 1) * h])
            {
                *dst = ev + pe;
            }
        }
        let mut cache = SeqCache {
            input: input.to_vec(),
            ..Default::default()
        };
        for l in 0..cfg.layers {
            let b = Self::layer_base(l);
            let mut lc = LayerCache::default();
            let (a, ln1) = layers::layernorm_forward(&x, w(b + LN1_G), w(b + LN1_B));
            let q = layers::linear_forward(&a, w(b + Q_W), w(b + Q_B), h, h);
            let k = layers::linear_forward(&a, w(b + K_W), w(b + K_B), h, h);
            let v = layers::linear_forward(&a, w(b + V_W), w(b + V_B), h, h);
            let (attn_out, attn) = layers::attention_forward(&q, &k, &v, s, h, cfg.heads);
            let o = layers::linear_forward(&attn_out, w(b + O_W), w(b + O_B), h, h);
            x.iter_mut().zip(&o).for_each(|(xv, ov)| *xv += ov);
            let (c, ln2) = layers::layernorm_forward(&x, w(b + LN2_G), w(b + LN2_B));
            let z1 = layers::linear_forward(&c, w(b + FF1_W), w(b + FF1_B), h, f);
            let mut act: Vec<f64> = z1.iter().map(|&z| layers::activate(cfg.activation, z)).collect();
            let mask = match rng.as_deref_mut() {
                Some(r) if p > 0.0 => {
                    let m = dropout_mask(act.len(), p, r);
                    act.iter_mut().zip(&m).for_each(|(v, k)| *v *= k);
                    Some(m)
                }
                _ => None,
            };
            let g = layers::linear_forward(&act, w(b + FF2_W), w(b + FF2_B), f, h);
            x.iter_mut().zip(&g).for_each(|(xv, gv)| *xv += gv);
            lc.ln1 = ln1;
            lc.a = a;
            lc.q = q;
            lc.k = k;
            lc.v = v;
            lc.attn = attn;
            lc.attn_out = attn_out;
            lc.ln2 = ln2;
            lc.c = c;
            lc.z1 = z1;
            lc.f = act;
            lc.mask = mask;
            cache.layers.push(lc);
        }
        let fb = self.final_base();
        let (zf, lnf) = layers::layernorm_forward(&x, w(fb), w(fb + 1));
        let y = layers::linear_forward(&zf, w(fb + 2), w(fb + 3), h, cfg.d_out);
        cache.lnf = lnf;
        cache.zf = zf;
        (y, cache)
    }

    fn seq_backward(&self, cache: &SeqCache, d_out: &[f64], grads: &mut Gradients) {
        let cfg = &self.config;
        let (h, f, s) = (cfg.width, cfg.ff_dim, cfg.s_out);
        let w = |i: usize| -> &[f64] { &self.params[i].data };
        let g = &mut grads.0;

        // Mutable access to two gradient buffers at once.
        fn pair(g: &mut [Vec<f64>], a: usize, b: usize) -> (&mut [f64], &mut [f64]) {
            debug_assert!(a < b);
            let (lo, hi) = g.split_at_mut(b);
            (&mut lo[a], &mut hi[0])
        }

        let fb = self.final_base();
        let dzf = {
            let (dw, db) = pair(g, fb + 2, fb + 3);
            layers::linear_backward(&cache.zf, d_out, w(fb + 2), h, cfg.d_out, dw, db, true)
        };
        let mut dx = {
            let (dg, dbt) = pair(g, fb, fb + 1);
            layers::layernorm_backward(&dzf, &cache.lnf, w(fb), dg, dbt)
        };

        for l in (0..cfg.layers).rev() {
            let b = Self::layer_base(l);
            let lc = &cache.layers[l];
            // feed-forward branch
            let mut df = {
                let (dw, db) = pair(g, b + FF2_W, b + FF2_B);
                layers::linear_backward(&lc.f, &dx, w(b + FF2_W), f, h, dw, db, true)
            };
            if let Some(m) = &lc.mask {
                df.iter_mut().zip(m).for_each(|(d, k)| *d *= k);
            }
            df.iter_mut()
                .zip(&lc.z1)
                .for_each(|(d, &z)| *d *= layers::activate_grad(cfg.activation, z));
            let dc = {
                let (dw, db) = pair(g, b + FF1_W, b + FF1_B);
                layers::linear_backward(&lc.c, &df, w(b + FF1_W), h, f, dw, db, true)
            };
            let dres = {
                let (dg, dbt) = pair(g, b + LN2_G, b + LN2_B);
                layers::layernorm_backward(&dc, &lc.ln2, w(b + LN2_G), dg, dbt)
            };
            dx.iter_mut().zip(&dres).for_each(|(a, r)| *a += r);

            // attention branch
            let dattn = {
                let (dw, db) = pair(g, b + O_W, b + O_B);
                layers::linear_backward(&lc.attn_out, &dx, w(b + O_W), h, h, dw, db, true)
            };
            let (dq, dk, dv) = layers::attention_backward(&dattn, &lc.q, &lc.k, &lc.v, &lc.attn, s, h, cfg.heads);
            let mut da = vec![0.0; s * h];
            for (dproj, wi) in [(&dq, Q_W), (&dk, K_W), (&dv, V_W)] {
                let (dw, db) = pair(g, b + wi, b + wi + 1);
                let part = layers::linear_backward(&lc.a, dproj, w(b + wi), h, h, dw, db, true);
                da.iter_mut().zip(&part).for_each(|(x, y)| *x += y);
            }
            let dres = {
                let (dg, dbt) = pair(g, b + LN1_G, b + LN1_B);
                layers::layernorm_backward(&da, &lc.ln1, w(b + LN1_G), dg, dbt)
            };
            dx.iter_mut().zip(&dres).for_each(|(a, r)| *a += r);
        }

        // positions fan back into their source tokens
        let mut de = vec![0.0; cfg.s_in * h];
        for pos in 0..s {
            let src = self.source_token(pos);
            for (d, &v) in de[src * h..(src + 1) * h].iter_mut().zip(&dx[pos * h..(pos + 1) * h]) {
                *d += v;
            }
        }
        let (dw, db) = pair(g, IN_W, IN_B);
        layers::linear_backward(&cache.input, &de, w(IN_W), cfg.d_in, h, dw, db, false);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_network_outputs_zero() {
        for cfg in [
            ModelConfig::mlp(3, 2, 4, vec![5]),
            ModelConfig::seqreg(3, 2, 2, 4, 4).with_depth(1, 2, 8),
        ] {
            let m = ReconstructionModel::zeros(cfg.clone()).unwrap();
            let x = Matrix::from_vec(cfg.s_in, 3, (0..cfg.s_in * 3).map(|i| i as f64 - 2.5).collect());
            let y = m.forward(&x).unwrap();
            assert!(y.as_slice().iter().all(|&v| v == 0.0), "{cfg:?}");
        }
    }

    #[test]
    fn identity_mlp_passes_input_through() {
        let cfg = ModelConfig::mlp(3, 3, 2, vec![3]).with_activation(Activation::Identity);
        let mut m = ReconstructionModel::zeros(cfg).unwrap();
        for l in 0..2 {
            for i in 0..3 {
                m.params[2 * l].data[i * 3 + i] = 1.0;
            }
        }
        let x = Matrix::from_vec(2, 3, vec![1.0, -2.0, 0.5, 3.0, 0.0, -1.0]);
        assert_eq!(m.forward(&x).unwrap(), x);
    }

    #[test]
    fn scalar_linear_hand_derivative() {
        let cfg = ModelConfig::mlp(1, 1, 1, vec![]);
        let mut m = ReconstructionModel::zeros(cfg).unwrap();
        m.params[0].data[0] = 1.0;
        let (loss, g) = m.loss_and_gradients(&[(&[2.0], &[0.0])]).unwrap();
        assert_eq!(loss, 4.0);
        assert_eq!(g.0[0], vec![8.0]);
        assert_eq!(g.0[1], vec![4.0]);
    }

    #[test]
    fn zero_residual_zero_gradient() {
        let cfg = ModelConfig::mlp(2, 2, 3, vec![4]);
        let m = ReconstructionModel::init(cfg, 3).unwrap();
        let x = vec![0.3, -0.2, 1.0, 0.1, -0.5, 0.7];
        let y = m.forward_slice(&x).unwrap();
        let (loss, g) = m.loss_and_gradients(&[(&x, &y)]).unwrap();
        assert_eq!(loss, 0.0);
        assert!(g.iter().all(|v| v == 0.0));
    }

    #[test]
    fn config_validation() {
        assert!(ModelConfig::mlp(2, 2, 3, vec![4]).validate().is_ok());
        let mut bad = ModelConfig::mlp(2, 2, 3, vec![4]);
        bad.s_out = 4;
        assert!(bad.validate().is_err());
        assert!(ModelConfig::seqreg(2, 2, 1, 4, 6)
            .with_depth(1, 4, 8)
            .validate()
            .is_err());
        assert!(ModelConfig::mlp(2, 2, 3, vec![]).with_dropout(1.0).validate().is_err());
    }

    #[test]
    fn preset_parameter_count() {
        // 4096·4096 + 4096 + 4096·2048 + 2048 + 2048·1024 + 1024
        assert_eq!(ModelConfig::preset_mlp_27m().param_count(), 27_270_144);
    }

    #[test]
    fn init_is_f32_representable_and_seeded() {
        let cfg = ModelConfig::seqreg(3, 2, 2, 4, 8).with_depth(1, 2, 8);
        let a = ReconstructionModel::init(cfg.clone(), 9).unwrap();
        let b = ReconstructionModel::init(cfg, 9).unwrap();
        assert_eq!(a, b);
        assert!(a.params.iter().flat_map(|p| &p.data).all(|&v| v as f32 as f64 == v));
    }

    #[test]
    fn capacity_check() {
        let cfg = ModelConfig::mlp(2, 2, 1, vec![]);
        assert!(capacity_warning(&cfg, Some(100)).is_some());
        assert!(capacity_warning(&cfg, Some(1)).is_none());
        assert!(capacity_warning(&cfg, None).is_none());
    }

    #[test]
    fn expansion_repeats_contiguously() {
        let m = ReconstructionModel::zeros(ModelConfig::seqreg(2, 2, 2, 8, 4).with_depth(1, 1, 4)).unwrap();
        let src: Vec<usize> = (0..8).map(|p| m.source_token(p)).collect();
        assert_eq!(src, vec![0, 0, 0, 0, 1, 1, 1, 1]);
    }
}
