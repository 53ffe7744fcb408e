//! Transformer encoder over visible patch tokens, mean pooling, the
//! projection head and linear classifiers.
//!
//! All forward functions record onto a [`Tape`] so the same code serves
//! training (`f32`) and finite-difference checks (`f64`). Views are batched as
//! `[V, n, P]` token tensors; every view in a batch must expose the same
//! number of tokens, which holds for any fixed mask spec.

mod params;

pub use params::{truncated_normal, Bound, Param, ParamStore};

use thiserror::Error;

use crate::patch::{pos_embed_2d, MaskedView, PatchError};
use crate::rng::{derived_rng, stage};
use crate::tensor::{BatchStats, Real, Tape, Tensor, TensorError, Var};

pub const LN_EPS: f64 = 1e-6;
pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;
pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Patch(#[from] PatchError),
    #[error("missing parameter {0}")]
    MissingParam(String),
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("layer {index} out of range for a stack of {len}")]
    Layer { index: usize, len: usize },
    #[error("views differ in token count ({0} vs {1})")]
    Ragged(usize, usize),
}

pub type Result<T> = std::result::Result<T, ModelError>;

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderConfig {
    pub depth: usize,
    pub dim: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub patch: (usize, usize),
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            depth: 4,
            dim: 96,
            heads: 4,
            mlp_ratio: 4,
            patch: (16, 16),
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(ModelError::Config(m));
        if self.depth == 0 {
            return bad("depth must be >= 1".into());
        }
        if self.heads == 0 || self.dim % self.heads != 0 {
            return bad(format!("dim {} not divisible by {} heads", self.dim, self.heads));
        }
        if self.dim % 4 != 0 {
            return bad(format!("dim {} must be a multiple of 4 for 2D positions", self.dim));
        }
        if self.mlp_ratio == 0 || self.patch.0 == 0 || self.patch.1 == 0 {
            return bad("mlp_ratio and patch sizes must be positive".into());
        }
        Ok(())
    }

    pub fn patch_len(&self) -> usize {
        self.patch.0 * self.patch.1
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProjectionConfig {
    pub hidden: usize,
    pub out: usize,
}

impl Default for ProjectionConfig {
    fn default() -> Self {
        Self {
            hidden: 512,
            out: 128,
        }
    }
}

fn linear<T: Real>(store: &mut ParamStore<T>, name: &str, fan_in: usize, fan_out: usize, bias: bool, rng: &mut crate::rng::Rng) {
    store.add(format!("{name}.weight"), truncated_normal(&[fan_in, fan_out], INIT_STD, rng), true);
    if bias {
        store.add(format!("{name}.bias"), Tensor::zeros(&[fan_out]), false);
    }
}

fn norm<T: Real>(store: &mut ParamStore<T>, name: &str, dim: usize, bias: bool) {
    store.add(format!("{name}.weight"), Tensor::full(&[dim], T::one()), false);
    if bias {
        store.add(format!("{name}.bias"), Tensor::zeros(&[dim]), false);
    }
}

/// Encoder parameters under `encoder.*`.
pub fn init_encoder<T: Real>(store: &mut ParamStore<T>, cfg: &EncoderConfig, seed: u64) -> Result<()> {
    cfg.validate()?;
    let mut rng = derived_rng(seed, &[stage::INIT, 0]);
    let d = cfg.dim;
    linear(store, "encoder.patch_embed", cfg.patch_len(), d, true, &mut rng);
    for i in 0..cfg.depth {
        let p = format!("encoder.blocks.{i}");
        norm(store, &format!("{p}.norm1"), d, true);
        linear(store, &format!("{p}.attn.qkv"), d, 3 * d, true, &mut rng);
        linear(store, &format!("{p}.attn.proj"), d, d, true, &mut rng);
        norm(store, &format!("{p}.norm2"), d, true);
        linear(store, &format!("{p}.mlp.fc1"), d, cfg.mlp_ratio * d, true, &mut rng);
        linear(store, &format!("{p}.mlp.fc2"), cfg.mlp_ratio * d, d, true, &mut rng);
    }
    norm(store, "encoder.norm", d, true);
    Ok(())
}

/// Projection head parameters under `head.*`: linear with bias, batch norm,
/// ReLU, bias-free linear, batch norm with scale only.
pub fn init_head<T: Real>(store: &mut ParamStore<T>, dim: usize, cfg: &ProjectionConfig, seed: u64) {
    let mut rng = derived_rng(seed, &[stage::INIT, 1]);
    linear(store, "head.fc1", dim, cfg.hidden, true, &mut rng);
    norm(store, "head.bn1", cfg.hidden, true);
    linear(store, "head.fc2", cfg.hidden, cfg.out, false, &mut rng);
    norm(store, "head.bn2", cfg.out, false);
    for (bn, c) in [("head.bn1", cfg.hidden), ("head.bn2", cfg.out)] {
        store.add_buffer(format!("{bn}.running_mean"), vec![0.0; c]);
        store.add_buffer(format!("{bn}.running_var"), vec![1.0; c]);
    }
}

/// Zero-initialised linear classifier under `{prefix}.*`.
pub fn init_classifier<T: Real>(store: &mut ParamStore<T>, prefix: &str, dim: usize, classes: usize) {
    store.add(format!("{prefix}.weight"), Tensor::zeros(&[dim, classes]), true);
    store.add(format!("{prefix}.bias"), Tensor::zeros(&[classes]), false);
}

/// Encoder plus projection head, freshly initialised.
pub fn init_pretrain_model<T: Real>(enc: &EncoderConfig, proj: &ProjectionConfig, seed: u64) -> Result<ParamStore<T>> {
    let mut store = ParamStore::new();
    init_encoder(&mut store, enc, seed)?;
    init_head(&mut store, enc.dim, proj, seed);
    Ok(store)
}

/// A batch of equally sized views with positional encodings.
#[derive(Clone, Debug, PartialEq)]
pub struct ViewBatch<T> {
    /// `[V, n, P]`
    pub tokens: Tensor<T>,
    /// `[V, n, D]`
    pub pos: Tensor<T>,
}

impl<T: Real> ViewBatch<T> {
    pub fn from_views(views: &[MaskedView], dim: usize) -> Result<Self> {
        let first = views
            .first()
            .ok_or_else(|| ModelError::Config("empty view batch".into()))?;
        let (n, p) = (first.visible_count(), first.patch_len());
        let mut tokens = Vec::with_capacity(views.len() * n * p);
        let mut pos = Vec::with_capacity(views.len() * n * dim);
        for v in views {
            if v.visible_count() != n || v.patch_len() != p {
                return Err(ModelError::Ragged(n, v.visible_count()));
            }
            tokens.extend(v.tokens().iter().map(|&x| T::of(x as f64)));
            pos.extend(pos_embed_2d(v.coords(), dim)?.into_iter().map(T::of));
        }
        Ok(Self {
            tokens: Tensor::new(&[views.len(), n, p], tokens)?,
            pos: Tensor::new(&[views.len(), n, dim], pos)?,
        })
    }

    pub fn views(&self) -> usize {
        self.tokens.shape()[0]
    }

    pub fn tokens_per_view(&self) -> usize {
        self.tokens.shape()[1]
    }
}

/// Per-layer token representations: the embedding output, then each block's
/// output, the last one passed through the final layer norm.
#[derive(Clone, Debug)]
pub struct LayerStack {
    pub layers: Vec<Var>,
}

impl LayerStack {
    pub fn last(&self) -> Var {
        *self.layers.last().expect("non-empty stack")
    }

    pub fn layer(&self, index: usize) -> Result<Var> {
        self.layers.get(index).copied().ok_or(ModelError::Layer {
            index,
            len: self.layers.len(),
        })
    }
}

fn affine<T: Real>(tape: &mut Tape<T>, p: &Bound<T>, name: &str, x: Var) -> Result<Var> {
    let y = tape.matmul(x, p.var(&format!("{name}.weight"))?)?;
    match p.store().position(&format!("{name}.bias")) {
        Some(_) => Ok(tape.add(y, p.var(&format!("{name}.bias"))?)?),
        None => Ok(y),
    }
}

fn layer_norm<T: Real>(tape: &mut Tape<T>, p: &Bound<T>, name: &str, x: Var) -> Result<Var> {
    let g = p.var(&format!("{name}.weight"))?;
    let b = p.var(&format!("{name}.bias"))?;
    Ok(tape.layer_norm(x, g, b, LN_EPS)?)
}

fn attention<T: Real>(tape: &mut Tape<T>, p: &Bound<T>, name: &str, cfg: &EncoderConfig, x: Var) -> Result<Var> {
    let shape = tape.shape(x).to_vec();
    let (v, n, d) = (shape[0], shape[1], shape[2]);
    let (h, dh) = (cfg.heads, cfg.head_dim());
    let qkv = affine(tape, p, &format!("{name}.qkv"), x)?;
    let qkv = tape.reshape(qkv, &[v, n, 3, h, dh])?;
    let qkv = tape.permute(qkv, &[2, 0, 3, 1, 4])?;
    let mut parts = Vec::with_capacity(3);
    for i in 0..3 {
        let s = tape.slice(qkv, 0, i, 1)?;
        parts.push(tape.reshape(s, &[v * h, n, dh])?);
    }
    let kt = tape.transpose(parts[1])?;
    let scores = tape.matmul(parts[0], kt)?;
    let scores = tape.scale(scores, 1.0 / (dh as f64).sqrt())?;
    let att = tape.softmax(scores, 2)?;
    let ctx = tape.matmul(att, parts[2])?;
    let ctx = tape.reshape(ctx, &[v, h, n, dh])?;
    let ctx = tape.permute(ctx, &[0, 2, 1, 3])?;
    let ctx = tape.reshape(ctx, &[v, n, d])?;
    affine(tape, p, &format!("{name}.proj"), ctx)
}

/// Pre-norm transformer over `[V, n, P]` tokens.
pub fn encode<T: Real>(tape: &mut Tape<T>, p: &Bound<T>, cfg: &EncoderConfig, batch: &ViewBatch<T>) -> Result<LayerStack> {
    cfg.validate()?;
    if batch.tokens_per_view() == 0 {
        return Err(ModelError::Config("views must contain at least one token".into()));
    }
    let tokens = tape.constant(batch.tokens.clone());
    let pos = tape.constant(batch.pos.clone());
    let x = affine(tape, p, "encoder.patch_embed", tokens)?;
    let mut h = tape.add(x, pos)?;
    let mut layers = vec![h];
    for i in 0..cfg.depth {
        let b = format!("encoder.blocks.{i}");
        let a = layer_norm(tape, p, &format!("{b}.norm1"), h)?;
        let a = attention(tape, p, &format!("{b}.attn"), cfg, a)?;
        h = tape.add(h, a)?;
        let m = layer_norm(tape, p, &format!("{b}.norm2"), h)?;
        let m = affine(tape, p, &format!("{b}.mlp.fc1"), m)?;
        let m = tape.gelu(m)?;
        let m = affine(tape, p, &format!("{b}.mlp.fc2"), m)?;
        h = tape.add(h, m)?;
        if i + 1 < cfg.depth {
            layers.push(h);
        }
    }
    layers.push(layer_norm(tape, p, "encoder.norm", h)?);
    Ok(LayerStack { layers })
}

/// Mean over the token axis: `[V, n, D] -> [V, D]`.
pub fn pool<T: Real>(tape: &mut Tape<T>, tokens: Var) -> Result<Var> {
    Ok(tape.mean(tokens, 1)?)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Output of the projection head; `stats` holds the two batch-norm batch
/// statistics in train mode.
pub struct Projection {
    pub z: Var,
    pub stats: Vec<(String, BatchStats)>,
}

fn batch_norm<T: Real>(
    tape: &mut Tape<T>,
    p: &Bound<T>,
    name: &str,
    x: Var,
    mode: Mode,
    stats: &mut Vec<(String, BatchStats)>,
) -> Result<Var> {
    let g = p.var(&format!("{name}.weight"))?;
    let beta = match p.store().position(&format!("{name}.bias")) {
        Some(_) => Some(p.var(&format!("{name}.bias"))?),
        None => None,
    };
    match mode {
        Mode::Train => {
            let (y, s) = tape.batch_norm_train(x, g, beta, BN_EPS)?;
            stats.push((name.to_string(), s));
            Ok(y)
        }
        Mode::Eval => {
            let store = p.store();
            let mean = store.buffer(&format!("{name}.running_mean"))?;
            let var = store.buffer(&format!("{name}.running_var"))?;
            Ok(tape.batch_norm_eval(x, g, beta, mean, var, BN_EPS)?)
        }
    }
}

/// `q: [B, D] -> z: [B, out]`, unit-norm rows.
pub fn project<T: Real>(tape: &mut Tape<T>, p: &Bound<T>, q: Var, mode: Mode) -> Result<Projection> {
    let mut stats = Vec::new();
    let h = affine(tape, p, "head.fc1", q)?;
    let h = batch_norm(tape, p, "head.bn1", h, mode, &mut stats)?;
    let h = tape.relu(h)?;
    let h = affine(tape, p, "head.fc2", h)?;
    let h = batch_norm(tape, p, "head.bn2", h, mode, &mut stats)?;
    let z = tape.l2_normalize(h, 1, 1e-12)?;
    Ok(Projection { z, stats })
}

/// Folds batch statistics into the running buffers.
pub fn update_running_stats<T: Real>(store: &mut ParamStore<T>, stats: &[(String, BatchStats)]) -> Result<()> {
    for (name, s) in stats {
        for (key, batch) in [("running_mean", &s.mean), ("running_var", &s.var_unbiased)] {
            let buf = store.buffer_mut(&format!("{name}.{key}"))?;
            for (r, b) in buf.iter_mut().zip(batch) {
                *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * b;
            }
        }
    }
    Ok(())
}

/// Affine classifier `q W + b` under `{prefix}.*`; returns logits.
pub fn classify<T: Real>(tape: &mut Tape<T>, p: &Bound<T>, prefix: &str, q: Var) -> Result<Var> {
    affine(tape, p, prefix, q)
}

/// Convenience for inference: pooled features of every layer, `[V, D]` each.
pub fn layer_features<T: Real>(
    store: &ParamStore<T>,
    cfg: &EncoderConfig,
    batch: &ViewBatch<T>,
) -> Result<Vec<Tensor<T>>> {
    let mut tape = Tape::new();
    let p = store.bind(&mut tape, false);
    let stack = encode(&mut tape, &p, cfg, batch)?;
    stack
        .layers
        .iter()
        .map(|&l| {
            let q = pool(&mut tape, l)?;
            Ok(tape.value(q).clone())
        })
        .collect()
}
