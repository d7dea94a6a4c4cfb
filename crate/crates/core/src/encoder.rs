//! Transformer context/target encoder, JEPA predictor, and attention pooling.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::pointops::{embed_patches, init_patch_encoder, TokenizerConfig};
use crate::tensorcore::{Graph, ParamStore, Real, Tensor, TensorError, Var};
use crate::Error;

pub const TOKENIZER: &str = "tokenizer";
pub const ENCODER: &str = "encoder";
pub const PREDICTOR: &str = "predictor";
pub const POOL: &str = "pool";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    pub depth: usize,
    pub embed_dim: usize,
    pub heads: usize,
    pub mlp_ratio: f64,
    /// Sinusoid frequencies per axis for the center positional encoding.
    pub pos_freqs: usize,
    pub predictor_depth: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self { depth: 4, embed_dim: 128, heads: 4, mlp_ratio: 4.0, pos_freqs: 4, predictor_depth: 2 }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<(), Error> {
        if self.embed_dim == 0 || self.heads == 0 || !self.embed_dim.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "embed_dim {} must be a positive multiple of heads {}",
                self.embed_dim, self.heads
            )));
        }
        if !(self.mlp_ratio > 0.0) || self.pos_freqs == 0 {
            return Err(Error::Config("mlp_ratio and pos_freqs must be positive".into()));
        }
        Ok(())
    }

    fn mlp_hidden(&self) -> usize {
        ((self.embed_dim as f64 * self.mlp_ratio).round() as usize).max(1)
    }

    pub fn pos_features(&self) -> usize {
        6 * self.pos_freqs
    }
}

/// `sin(2^f * pi * x)`, `cos(2^f * pi * x)` per axis and frequency, `M x 6F`.
pub fn sinusoidal_features<T: Real>(positions: &[[f64; 3]], freqs: usize) -> Tensor<T> {
    let mut data = Vec::with_capacity(positions.len() * 6 * freqs);
    for p in positions {
        for &x in p {
            for f in 0..freqs {
                let w = std::f64::consts::PI * (1u64 << f) as f64 * x;
                data.push(T::of(w.sin()));
                data.push(T::of(w.cos()));
            }
        }
    }
    if positions.is_empty() {
        return Tensor::zeros(&[0, 6 * freqs]);
    }
    Tensor::new(&[positions.len(), 6 * freqs], data).expect("positional feature shape")
}

fn init_linear<T: Real, R: Rng>(store: &mut ParamStore<T>, name: &str, fan_in: usize, fan_out: usize, rng: &mut R) {
    store.insert_glorot(&format!("{name}.w"), fan_in, fan_out, rng);
    store.insert_const(&format!("{name}.b"), &[fan_out], 0.0);
}

fn init_norm<T: Real>(store: &mut ParamStore<T>, name: &str, dim: usize) {
    store.insert_const(&format!("{name}.g"), &[dim], 1.0);
    store.insert_const(&format!("{name}.b"), &[dim], 0.0);
}

fn init_block<T: Real, R: Rng>(store: &mut ParamStore<T>, p: &str, cfg: &EncoderConfig, rng: &mut R) {
    let d = cfg.embed_dim;
    init_norm(store, &format!("{p}.ln1"), d);
    for proj in ["q", "k", "v", "o"] {
        init_linear(store, &format!("{p}.attn.{proj}"), d, d, rng);
    }
    init_norm(store, &format!("{p}.ln2"), d);
    init_linear(store, &format!("{p}.mlp.fc1"), d, cfg.mlp_hidden(), rng);
    init_linear(store, &format!("{p}.mlp.fc2"), cfg.mlp_hidden(), d, rng);
}

/// Tokenizer plus context encoder, the parameters the EMA target mirrors.
pub fn init_backbone<T: Real, R: Rng>(
    store: &mut ParamStore<T>,
    tok: &TokenizerConfig,
    cfg: &EncoderConfig,
    rng: &mut R,
) {
    init_patch_encoder(store, TOKENIZER, tok.hidden, cfg.embed_dim, rng);
    init_linear(store, &format!("{ENCODER}.pos"), cfg.pos_features(), cfg.embed_dim, rng);
    for b in 0..cfg.depth {
        init_block(store, &format!("{ENCODER}.blocks.{b}"), cfg, rng);
    }
    if cfg.depth > 0 {
        init_norm(store, &format!("{ENCODER}.norm"), cfg.embed_dim);
    }
}

pub fn init_predictor<T: Real, R: Rng>(store: &mut ParamStore<T>, cfg: &EncoderConfig, rng: &mut R) {
    let d = cfg.embed_dim;
    init_linear(store, &format!("{PREDICTOR}.in"), d, d, rng);
    init_linear(store, &format!("{PREDICTOR}.pos"), cfg.pos_features(), d, rng);
    store.insert_small(&format!("{PREDICTOR}.mask_token"), &[1, d], 0.02, rng);
    for b in 0..cfg.predictor_depth {
        init_block(store, &format!("{PREDICTOR}.blocks.{b}"), cfg, rng);
    }
    init_norm(store, &format!("{PREDICTOR}.norm"), d);
    init_linear(store, &format!("{PREDICTOR}.out"), d, d, rng);
}

pub fn init_pool<T: Real, R: Rng>(store: &mut ParamStore<T>, dim: usize, rng: &mut R) {
    store.insert_small(&format!("{POOL}.query"), &[1, dim], 0.02, rng);
    init_linear(store, &format!("{POOL}.k"), dim, dim, rng);
    init_linear(store, &format!("{POOL}.v"), dim, dim, rng);
}

pub(crate) fn linear<T: Real>(g: &mut Graph<T>, s: &ParamStore<T>, name: &str, x: Var) -> Result<Var, TensorError> {
    let w = g.named(s, &format!("{name}.w"))?;
    let b = g.named(s, &format!("{name}.b"))?;
    let h = g.matmul(x, w)?;
    g.add_bias(h, b)
}

fn norm<T: Real>(g: &mut Graph<T>, s: &ParamStore<T>, name: &str, x: Var) -> Result<Var, TensorError> {
    let gamma = g.named(s, &format!("{name}.g"))?;
    let beta = g.named(s, &format!("{name}.b"))?;
    g.layernorm(x, gamma, beta)
}

/// Pre-norm transformer block: `x + attn(ln(x))`, then `x + mlp(ln(x))`.
fn block<T: Real>(g: &mut Graph<T>, s: &ParamStore<T>, p: &str, heads: usize, x: Var) -> Result<Var, TensorError> {
    let h = norm(g, s, &format!("{p}.ln1"), x)?;
    let q = linear(g, s, &format!("{p}.attn.q"), h)?;
    let k = linear(g, s, &format!("{p}.attn.k"), h)?;
    let v = linear(g, s, &format!("{p}.attn.v"), h)?;
    let a = g.attention(q, k, v, heads)?;
    let a = linear(g, s, &format!("{p}.attn.o"), a)?;
    let x = g.add(x, a)?;
    let h = norm(g, s, &format!("{p}.ln2"), x)?;
    let h = linear(g, s, &format!("{p}.mlp.fc1"), h)?;
    let h = g.gelu(h)?;
    let h = linear(g, s, &format!("{p}.mlp.fc2"), h)?;
    g.add(x, h)
}

/// Patch tokens for `rel` (center-relative member coordinates, `(M*S) x 3`).
pub fn tokenize<T: Real>(
    g: &mut Graph<T>,
    s: &ParamStore<T>,
    rel: &Tensor<T>,
    group_size: usize,
) -> Result<Var, TensorError> {
    let rel = g.input(rel.clone());
    embed_patches(g, s, TOKENIZER, rel, group_size)
}

/// Encodes `M` tokens at `positions`. With `depth = 0` this returns the tokens
/// plus their positional encodings.
pub fn encode<T: Real>(
    g: &mut Graph<T>,
    s: &ParamStore<T>,
    cfg: &EncoderConfig,
    tokens: Var,
    positions: &[[f64; 3]],
) -> Result<Var, TensorError> {
    if positions.is_empty() {
        return Err(TensorError::Shape { op: "encode", detail: "no tokens".into() });
    }
    let pe = g.input(sinusoidal_features(positions, cfg.pos_freqs));
    let pe = linear(g, s, &format!("{ENCODER}.pos"), pe)?;
    let mut x = g.add(tokens, pe)?;
    for b in 0..cfg.depth {
        x = block(g, s, &format!("{ENCODER}.blocks.{b}"), cfg.heads, x)?;
    }
    if cfg.depth > 0 {
        x = norm(g, s, &format!("{ENCODER}.norm"), x)?;
    }
    Ok(x)
}

/// Predicts one latent per target position from context latents.
pub fn predict_targets<T: Real>(
    g: &mut Graph<T>,
    s: &ParamStore<T>,
    cfg: &EncoderConfig,
    context: Var,
    context_positions: &[[f64; 3]],
    target_positions: &[[f64; 3]],
) -> Result<Var, TensorError> {
    let d = cfg.embed_dim;
    if target_positions.is_empty() {
        return Ok(g.input(Tensor::zeros(&[0, d])));
    }
    let c = linear(g, s, &format!("{PREDICTOR}.in"), context)?;
    let cpe = g.input(sinusoidal_features(context_positions, cfg.pos_freqs));
    let cpe = linear(g, s, &format!("{PREDICTOR}.pos"), cpe)?;
    let c = g.add(c, cpe)?;
    let tpe = g.input(sinusoidal_features(target_positions, cfg.pos_freqs));
    let tpe = linear(g, s, &format!("{PREDICTOR}.pos"), tpe)?;
    let mask = g.named(s, &format!("{PREDICTOR}.mask_token"))?;
    let masks = g.gather_rows(mask, &vec![0; target_positions.len()])?;
    let t = g.add(masks, tpe)?;
    let mut x = g.concat(&[c, t], 0)?;
    for b in 0..cfg.predictor_depth {
        x = block(g, s, &format!("{PREDICTOR}.blocks.{b}"), cfg.heads, x)?;
    }
    x = norm(g, s, &format!("{PREDICTOR}.norm"), x)?;
    let n_ctx = context_positions.len();
    let idx: Vec<usize> = (n_ctx..n_ctx + target_positions.len()).collect();
    let x = g.gather_rows(x, &idx)?;
    linear(g, s, &format!("{PREDICTOR}.out"), x)
}

/// A learned query attends over `latents`; returns the `1 x D` weighted sum of
/// value-projected latents.
pub fn attention_pool<T: Real>(g: &mut Graph<T>, s: &ParamStore<T>, latents: Var) -> Result<Var, TensorError> {
    let q = g.named(s, &format!("{POOL}.query"))?;
    let k = linear(g, s, &format!("{POOL}.k"), latents)?;
    let v = linear(g, s, &format!("{POOL}.v"), latents)?;
    g.attention(q, k, v, 1)
}

/// Backbone forward for one object: patch tokens, then the encoder over all of them.
pub fn encode_object<T: Real>(
    g: &mut Graph<T>,
    s: &ParamStore<T>,
    cfg: &EncoderConfig,
    rel: &Tensor<T>,
    positions: &[[f64; 3]],
    group_size: usize,
) -> Result<Var, TensorError> {
    let tokens = tokenize(g, s, rel, group_size)?;
    encode(g, s, cfg, tokens, positions)
}

/// Context encoder parameters paired with their EMA target copy.
#[derive(Clone, Debug)]
pub struct EmaPair<T: Real> {
    pub context: ParamStore<T>,
    pub target: ParamStore<T>,
    pub tau: f64,
}

impl<T: Real> EmaPair<T> {
    /// Target starts as an exact copy of the backbone parameters in `context`.
    pub fn new(context: ParamStore<T>, tau: f64) -> Self {
        let target = context.filter_prefix(&[TOKENIZER, ENCODER]);
        Self { context, target, tau }
    }

    pub fn update(&mut self) -> Result<(), Error> {
        ema_update(&mut self.target, &self.context, self.tau)
    }
}

/// `target = tau * target + (1 - tau) * context` for every target tensor.
pub fn ema_update<T: Real>(target: &mut ParamStore<T>, context: &ParamStore<T>, tau: f64) -> Result<(), Error> {
    if !(0.0..=1.0).contains(&tau) {
        return Err(Error::Config(format!("tau {tau} outside [0, 1]")));
    }
    let (t, c) = (T::of(tau), T::of(1.0 - tau));
    for id in 0..target.len() {
        let name = target.name(id).to_string();
        let src =
            context.get(&name).ok_or_else(|| Error::Config(format!("context is missing target parameter {name}")))?;
        if src.shape() != target.tensor(id).shape() {
            return Err(Error::Config(format!("shape mismatch for {name}")));
        }
        for (dst, &s) in target.tensor_mut(id).data_mut().iter_mut().zip(src.data()) {
            *dst = t * *dst + c * s;
        }
    }
    Ok(())
}

/// Linear `tau` schedule from `start` to `end` over `steps` updates.
pub fn tau_at(start: f64, end: f64, step: usize, steps: usize) -> f64 {
    if steps <= 1 {
        return end;
    }
    start + (end - start) * (step as f64 / (steps - 1) as f64)
}
