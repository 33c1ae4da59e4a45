//! Spatial transformer: masked multi-head attention over agent tokens with a
//! rotary encoding of 2-D positions in the first layer.
//!
//! Tokens are rows (`N × d`). The rotary phases turn every query/key pair
//! product into a function of the relative position `x_m - x_n` only, so
//! first-layer attention is unchanged by a global translation.

use std::f64::consts::PI;
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::ndtensor::nn::{uniform_init, LayerNorm, Linear};
use crate::ndtensor::{Bound, ParamId, ParamStore, Tape, Tensor, Var};
use crate::scalar::dist2;
use crate::world::CommGraph;
use crate::{Point, Scalar};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct STConfig {
    pub layers: usize,
    pub heads: usize,
    pub head_dim: usize,
    /// Rotary encoding period, meters.
    pub rope_period: f64,
    /// Attention window radius, meters.
    pub attention_radius: f64,
    pub pre_norm: bool,
}

impl Default for STConfig {
    fn default() -> Self {
        Self { layers: 8, heads: 8, head_dim: 32, rope_period: 1024.0, attention_radius: 256.0, pre_norm: true }
    }
}

impl STConfig {
    /// Two layers, two heads of 16 for a 256 m world.
    pub fn desk() -> Self {
        Self { layers: 2, heads: 2, head_dim: 16, rope_period: 256.0, ..Self::default() }
    }

    pub fn model_dim(&self) -> usize {
        self.heads * self.head_dim
    }

    pub fn validate(&self) -> Result<()> {
        if self.head_dim == 0 || !self.head_dim.is_multiple_of(4) {
            return Err(Error::Config(format!("head_dim {} must be a positive multiple of 4", self.head_dim)));
        }
        if self.layers == 0 || self.heads == 0 {
            return Err(Error::Config("layers and heads must be positive".into()));
        }
        if !(self.rope_period > 1.0) {
            return Err(Error::Config("rope_period must exceed 1 m".into()));
        }
        Ok(())
    }
}

/// `N × N` attention permissions, row-major, `true` = may attend.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttentionMask {
    n: usize,
    allowed: Vec<bool>,
}

impl AttentionMask {
    /// Everyone attends to everyone.
    pub fn full(n: usize) -> Self {
        Self { n, allowed: vec![true; n * n] }
    }

    pub fn from_fn(n: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        Self { n, allowed: (0..n * n).map(|k| k / n == k % n || f(k / n, k % n)).collect() }
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn get(&self, i: usize, j: usize) -> bool {
        self.allowed[i * self.n + j]
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.allowed
    }

    /// Agents visible from `i`, ascending (always includes `i`).
    pub fn row_members(&self, i: usize) -> Vec<usize> {
        (0..self.n).filter(|&j| self.get(i, j)).collect()
    }

    /// Restriction to the agents `idx` (in that order).
    pub fn restrict(&self, idx: &[usize]) -> Self {
        Self::from_fn(idx.len(), |a, b| self.get(idx[a], idx[b]))
    }

    /// Block-diagonal union: independent samples stacked into one token set.
    pub fn block_diag(parts: &[AttentionMask]) -> Self {
        let n = parts.iter().map(|m| m.n).sum();
        let mut allowed = vec![false; n * n];
        let mut off = 0;
        for m in parts {
            for i in 0..m.n {
                for j in 0..m.n {
                    allowed[(off + i) * n + off + j] = m.get(i, j);
                }
            }
            off += m.n;
        }
        Self { n, allowed }
    }
}

/// Window mask (distance ≤ `radius`) AND same communication component. The
/// diagonal is always allowed.
pub fn build_mask<S: Scalar>(positions: &[Point<S>], graph: &CommGraph, radius: S) -> Result<AttentionMask> {
    if graph.len() != positions.len() {
        return Err(shape_err!("graph over {} robots, {} positions", graph.len(), positions.len()));
    }
    let r2 = radius * radius;
    Ok(AttentionMask::from_fn(positions.len(), |i, j| {
        dist2(positions[i], positions[j]) <= r2 && graph.component(i) == graph.component(j)
    }))
}

/// Rotary phases for `N` positions and per-head dimension `D`.
#[derive(Debug, Clone)]
pub struct RopeBasis<S> {
    pub frequencies: Vec<S>,
    /// `N × D/2`, row-major.
    pub cos: Arc<Vec<S>>,
    pub sin: Arc<Vec<S>>,
}

impl<S: Scalar> RopeBasis<S> {
    pub fn rows(&self) -> usize {
        self.cos.len() / (2 * self.frequencies.len()).max(1)
    }

    /// Restriction to the agents `idx` (in that order).
    pub fn restrict(&self, idx: &[usize]) -> Self {
        let w = 2 * self.frequencies.len();
        let pick = |v: &Vec<S>| Arc::new(idx.iter().flat_map(|&i| v[i * w..(i + 1) * w].iter().copied()).collect());
        Self { frequencies: self.frequencies.clone(), cos: pick(&self.cos), sin: pick(&self.sin) }
    }

    /// Row-wise concatenation of bases sharing the same frequencies.
    pub fn stack(parts: &[RopeBasis<S>]) -> Result<Self> {
        let first = parts.first().ok_or_else(|| shape_err!("no rotary bases to stack"))?;
        if parts.iter().any(|b| b.frequencies != first.frequencies) {
            return Err(shape_err!("rotary bases with different frequencies"));
        }
        let cat = |f: fn(&RopeBasis<S>) -> &Arc<Vec<S>>| Arc::new(parts.iter().flat_map(|b| f(b).iter().copied()).collect());
        Ok(Self { frequencies: first.frequencies.clone(), cos: cat(|b| &b.cos), sin: cat(|b| &b.sin) })
    }
}

/// `ω_i = 2π τ^(-4i/D)` for `i = 1..=D/4`.
pub fn rope_frequencies<S: Scalar>(dim: usize, period: f64) -> Vec<S> {
    (1..=dim / 4).map(|i| S::of(2.0 * PI * period.powf(-4.0 * i as f64 / dim as f64))).collect()
}

/// Column `c` of the phase matrix uses frequency `ω_{⌈(c+1)/2⌉}` and the x
/// coordinate when `c` is even, y when odd.
pub fn rope_phases<S: Scalar>(positions: &[Point<S>], dim: usize, period: f64) -> Result<RopeBasis<S>> {
    if dim == 0 || !dim.is_multiple_of(4) {
        return Err(shape_err!("rotary dimension {dim} must be a positive multiple of 4"));
    }
    let freqs = rope_frequencies::<S>(dim, period);
    let half = dim / 2;
    let mut cos = Vec::with_capacity(positions.len() * half);
    let mut sin = Vec::with_capacity(positions.len() * half);
    for p in positions {
        for c in 0..half {
            let theta = freqs[c / 2] * p[c % 2];
            cos.push(theta.cos());
            sin.push(theta.sin());
        }
    }
    Ok(RopeBasis { frequencies: freqs, cos: Arc::new(cos), sin: Arc::new(sin) })
}

/// One attention block: pre-norm, multi-head masked attention, output
/// projection, residual and leaky ReLU:
/// `Z' = σ([Y¹ … Yᴴ] W + Z)`.
#[derive(Debug, Clone)]
pub struct AttentionBlock {
    heads: usize,
    head_dim: usize,
    pre_norm: bool,
    norm: LayerNorm,
    /// Present for cross-attention: normalizes the context tokens.
    norm_ctx: Option<LayerNorm>,
    q: ParamId,
    k: ParamId,
    v: ParamId,
    out: Linear,
}

impl AttentionBlock {
    pub fn new<S: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<S>,
        name: &str,
        dim: usize,
        cfg: &STConfig,
        cross: bool,
        rng: &mut R,
    ) -> Result<Self> {
        let inner = cfg.heads * cfg.head_dim;
        let norm = LayerNorm::new(store, &format!("{name}.norm"), dim)?;
        let norm_ctx = if cross { Some(LayerNorm::new(store, &format!("{name}.norm_ctx"), dim)?) } else { None };
        let q = store.add(format!("{name}.q"), uniform_init(&[dim, inner], dim, rng))?;
        let k = store.add(format!("{name}.k"), uniform_init(&[dim, inner], dim, rng))?;
        let v = store.add(format!("{name}.v"), uniform_init(&[dim, inner], dim, rng))?;
        let out = Linear::new(store, &format!("{name}.out"), inner, dim, rng)?;
        Ok(Self { heads: cfg.heads, head_dim: cfg.head_dim, pre_norm: cfg.pre_norm, norm, norm_ctx, q, k, v, out })
    }

    pub fn is_cross(&self) -> bool {
        self.norm_ctx.is_some()
    }

    /// `x` is `N × d`. `context` (cross-attention only) is `N × d` over the
    /// same agents. When `rope` is given, queries and keys are rotated.
    /// Attention matrices are appended to `attn_out` when provided.
    #[allow(clippy::too_many_arguments)]
    pub fn forward<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        p: &Bound,
        x: Var,
        context: Option<Var>,
        mask: &AttentionMask,
        rope: Option<&RopeBasis<S>>,
        mut attn_out: Option<&mut Vec<Var>>,
    ) -> Result<Var> {
        let (n, _) = tape.value(x).dims2()?;
        if mask.len() != n {
            return Err(shape_err!("mask over {} agents for {} tokens", mask.len(), n));
        }
        let h = if self.pre_norm { self.norm.forward(tape, p, x)? } else { x };
        let src = match (context, &self.norm_ctx) {
            (Some(c), Some(nc)) => {
                if tape.value(c).dims2()?.0 != n {
                    return Err(shape_err!("context has a different agent count"));
                }
                if self.pre_norm {
                    nc.forward(tape, p, c)?
                } else {
                    c
                }
            }
            (None, None) => h,
            _ => return Err(Error::Contract("cross-attention block needs a context, self-attention none".into())),
        };
        let q_all = tape.matmul(h, p.var(self.q))?;
        let k_all = tape.matmul(src, p.var(self.k))?;
        let v_all = tape.matmul(src, p.var(self.v))?;
        let scale = S::one() / S::of_usize(self.head_dim).sqrt();
        let mut ys = Vec::with_capacity(self.heads);
        for hd in 0..self.heads {
            let start = hd * self.head_dim;
            let mut q = tape.slice(q_all, 1, start, self.head_dim)?;
            let mut k = tape.slice(k_all, 1, start, self.head_dim)?;
            let v = tape.slice(v_all, 1, start, self.head_dim)?;
            if let Some(r) = rope {
                q = tape.rope(q, Arc::clone(&r.cos), Arc::clone(&r.sin))?;
                k = tape.rope(k, Arc::clone(&r.cos), Arc::clone(&r.sin))?;
            }
            let kt = tape.transpose(k)?;
            let logits = tape.matmul(q, kt)?;
            let logits = tape.scale(logits, scale);
            let a = tape.softmax_rows(logits, Some(mask.as_slice()))?;
            if let Some(sink) = attn_out.as_deref_mut() {
                sink.push(a);
            }
            ys.push(tape.matmul(a, v)?);
        }
        let cat = if ys.len() == 1 { ys[0] } else { tape.concat(&ys, 1)? };
        let o = self.out.forward(tape, p, cat)?;
        let r = tape.add(o, x)?;
        Ok(tape.leaky_relu(r))
    }
}

/// Self-attention encoder over `[z_i, x_i]` tokens.
#[derive(Debug, Clone)]
pub struct Encoder {
    config: STConfig,
    input: Linear,
    blocks: Vec<AttentionBlock>,
}

impl Encoder {
    pub fn new<S: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<S>,
        name: &str,
        in_dim: usize,
        cfg: &STConfig,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.model_dim();
        let input = Linear::new(store, &format!("{name}.input"), in_dim, d, rng)?;
        let blocks = (0..cfg.layers)
            .map(|l| AttentionBlock::new(store, &format!("{name}.block{l}"), d, cfg, false, rng))
            .collect::<Result<_>>()?;
        Ok(Self { config: cfg.clone(), input, blocks })
    }

    pub fn config(&self) -> &STConfig {
        &self.config
    }

    /// `tokens` is `N × in_dim`; returns the conditioning `N × d`.
    pub fn forward<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        p: &Bound,
        tokens: Var,
        rope: &RopeBasis<S>,
        mask: &AttentionMask,
        mut attn_out: Option<&mut Vec<Var>>,
    ) -> Result<Var> {
        let mut z = self.input.forward(tape, p, tokens)?;
        for (l, b) in self.blocks.iter().enumerate() {
            let r = (l == 0).then_some(rope);
            z = b.forward(tape, p, z, None, mask, r, attn_out.as_deref_mut())?;
        }
        Ok(z)
    }
}

/// Sinusoidal embeddings of diffusion steps, one row per entry of `steps`.
pub fn step_embedding<S: Scalar>(steps: &[usize], dim: usize) -> Tensor<S> {
    let half = dim / 2;
    let mut e = vec![S::zero(); steps.len() * dim];
    for (r, &k) in steps.iter().enumerate() {
        for j in 0..half {
            let f = (-(10000f64.ln()) * j as f64 / half.max(1) as f64).exp();
            e[r * dim + 2 * j] = S::of((k as f64 * f).sin());
            e[r * dim + 2 * j + 1] = S::of((k as f64 * f).cos());
        }
    }
    Tensor::new(&[steps.len(), dim], e).expect("embedding shape")
}

/// Noise predictor: alternating self-attention over the noisy action tokens
/// and cross-attention onto the encoder output.
#[derive(Debug, Clone)]
pub struct Decoder {
    config: STConfig,
    action_dim: usize,
    input: Linear,
    step: Linear,
    blocks: Vec<AttentionBlock>,
    final_norm: LayerNorm,
    output: Linear,
}

impl Decoder {
    pub fn new<S: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<S>,
        name: &str,
        action_dim: usize,
        cfg: &STConfig,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.model_dim();
        let input = Linear::new(store, &format!("{name}.input"), action_dim, d, rng)?;
        let step = Linear::new(store, &format!("{name}.step"), d, d, rng)?;
        let blocks = (0..cfg.layers)
            .map(|l| AttentionBlock::new(store, &format!("{name}.block{l}"), d, cfg, l % 2 == 1, rng))
            .collect::<Result<_>>()?;
        let final_norm = LayerNorm::new(store, &format!("{name}.final_norm"), d)?;
        let output = Linear::new(store, &format!("{name}.output"), d, action_dim, rng)?;
        Ok(Self { config: cfg.clone(), action_dim, input, step, blocks, final_norm, output })
    }

    pub fn config(&self) -> &STConfig {
        &self.config
    }

    pub fn output_layer(&self) -> Linear {
        self.output
    }

    /// Predicts the noise in `u_k` (`N × action_dim`). `steps[i]` is the
    /// diffusion step of row `i`; rows of one sample share a step, while a
    /// batch of block-masked samples may mix steps.
    #[allow(clippy::too_many_arguments)]
    pub fn forward<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        p: &Bound,
        u_k: Var,
        context: Var,
        rope: &RopeBasis<S>,
        mask: &AttentionMask,
        steps: &[usize],
    ) -> Result<Var> {
        let (n, a) = tape.value(u_k).dims2()?;
        if a != self.action_dim || steps.len() != n {
            return Err(shape_err!("decoder expects {n} steps and {} action components", self.action_dim));
        }
        let emb = tape.constant(step_embedding(steps, self.config.model_dim()));
        let t = self.step.forward(tape, p, emb)?;
        let z = self.input.forward(tape, p, u_k)?;
        let mut z = tape.add(z, t)?;
        for (l, b) in self.blocks.iter().enumerate() {
            let r = (l == 0).then_some(rope);
            let ctx = b.is_cross().then_some(context);
            z = b.forward(tape, p, z, ctx, mask, r, None)?;
        }
        let z = self.final_norm.forward(tape, p, z)?;
        self.output.forward(tape, p, z)
    }
}
