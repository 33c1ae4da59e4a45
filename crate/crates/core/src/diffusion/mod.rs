//! Noise schedule, forward corruption, the noise-prediction loss and the
//! DDIM reverse sampler.

mod model;

pub use model::{ExecutionMode, MadpModel, ModelConfig, SamplerSettings, TrainBatch, TOKEN_DIM_EXTRA};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{contract_err, shape_err, Error, Result};
use crate::ndtensor::{Tape, Tensor, Var};
use crate::rng::{keyed_rng, normal_vec, Stream};
use crate::Scalar;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DiffusionConfig {
    /// Number of forward steps `K`.
    pub steps: usize,
    pub alpha_start: f64,
    pub alpha_end: f64,
    /// Denoising steps used at inference.
    pub sample_steps: usize,
    /// DDIM stochasticity, 0 = deterministic.
    pub eta: f64,
    /// Bound applied to each coordinate of the predicted clean action during
    /// sampling; `None` disables it.
    pub clip_sample: Option<f64>,
}

impl Default for DiffusionConfig {
    fn default() -> Self {
        Self {
            steps: 1000,
            alpha_start: 0.9999,
            alpha_end: 0.98,
            sample_steps: 50,
            eta: 0.0,
            clip_sample: Some(1.0),
        }
    }
}

impl DiffusionConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = |a: f64| a > 0.0 && a < 1.0;
        if self.steps == 0 || !ok(self.alpha_start) || !ok(self.alpha_end) || self.alpha_end > self.alpha_start {
            return Err(Error::Config("schedule needs K ≥ 1 and 1 > alpha_start ≥ alpha_end > 0".into()));
        }
        if self.sample_steps == 0 || self.sample_steps > self.steps {
            return Err(Error::Config(format!("sample_steps must be in 1..={}", self.steps)));
        }
        if !(0.0..=1.0).contains(&self.eta) {
            return Err(Error::Config("eta must lie in [0, 1]".into()));
        }
        if self.clip_sample.is_some_and(|c| !(c > 0.0)) {
            return Err(Error::Config("clip_sample must be positive".into()));
        }
        Ok(())
    }
}

/// `α_k` linearly spaced and decreasing, `ᾱ_k = Π_{j≤k} α_j`. Steps are
/// 1-based; `ᾱ_0 = 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule<S> {
    alphas: Vec<S>,
    alpha_bars: Vec<S>,
}

impl<S: Scalar> NoiseSchedule<S> {
    pub fn linear(steps: usize, alpha_start: f64, alpha_end: f64) -> Result<Self> {
        DiffusionConfig { steps, alpha_start, alpha_end, sample_steps: 1, eta: 0.0, clip_sample: None }.validate()?;
        let mut alphas = Vec::with_capacity(steps);
        let mut alpha_bars = Vec::with_capacity(steps);
        let mut prod = 1.0f64;
        for i in 0..steps {
            let a = if steps == 1 {
                alpha_start
            } else {
                alpha_start + (alpha_end - alpha_start) * i as f64 / (steps - 1) as f64
            };
            prod *= a;
            alphas.push(S::of(a));
            alpha_bars.push(S::of(prod));
        }
        Ok(Self { alphas, alpha_bars })
    }

    pub fn from_config(cfg: &DiffusionConfig) -> Result<Self> {
        Self::linear(cfg.steps, cfg.alpha_start, cfg.alpha_end)
    }

    pub fn steps(&self) -> usize {
        self.alphas.len()
    }

    /// `α_k` for `1 ≤ k ≤ K`.
    pub fn alpha(&self, k: usize) -> S {
        self.alphas[k - 1]
    }

    /// `ᾱ_k` for `0 ≤ k ≤ K`.
    pub fn alpha_bar(&self, k: usize) -> S {
        if k == 0 {
            S::one()
        } else {
            self.alpha_bars[k - 1]
        }
    }

    fn check_step(&self, k: usize) -> Result<()> {
        if k == 0 || k > self.steps() {
            return Err(contract_err!("diffusion step {k} outside 1..={}", self.steps()));
        }
        Ok(())
    }

    /// `U_k = √ᾱ_k U₀ + √(1−ᾱ_k) ε`.
    pub fn forward_sample(&self, u0: &Tensor<S>, k: usize, eps: &Tensor<S>) -> Result<Tensor<S>> {
        self.check_step(k)?;
        let (a, b) = (self.alpha_bar(k).sqrt(), (S::one() - self.alpha_bar(k)).sqrt());
        u0.zip_with(eps, |u, e| a * u + b * e)
    }

    /// One Markov step `U_k = √α_k U_{k−1} + √(1−α_k) ε`.
    pub fn forward_step(&self, u_prev: &Tensor<S>, k: usize, eps: &Tensor<S>) -> Result<Tensor<S>> {
        self.check_step(k)?;
        let (a, b) = (self.alpha(k).sqrt(), (S::one() - self.alpha(k)).sqrt());
        u_prev.zip_with(eps, |u, e| a * u + b * e)
    }

    /// Row-wise forward sampling: row `r` of `u0` is corrupted to step `steps[r]`.
    pub fn forward_sample_rows(&self, u0: &Tensor<S>, steps: &[usize], eps: &Tensor<S>) -> Result<Tensor<S>> {
        let (rows, cols) = u0.dims2()?;
        if steps.len() != rows || eps.shape() != u0.shape() {
            return Err(shape_err!("forward_sample_rows: {rows} rows, {} steps, eps {:?}", steps.len(), eps.shape()));
        }
        let mut out = Vec::with_capacity(rows * cols);
        for (r, &k) in steps.iter().enumerate() {
            self.check_step(k)?;
            let (a, b) = (self.alpha_bar(k).sqrt(), (S::one() - self.alpha_bar(k)).sqrt());
            for c in 0..cols {
                out.push(a * u0.at2(r, c) + b * eps.at2(r, c));
            }
        }
        Tensor::new(u0.shape(), out)
    }

    /// `S` evenly spaced steps from `K` down to 1.
    pub fn ddim_subset(&self, sample_steps: usize) -> Result<Vec<usize>> {
        let k = self.steps();
        if sample_steps == 0 || sample_steps > k {
            return Err(contract_err!("cannot take {sample_steps} sampling steps from K = {k}"));
        }
        if sample_steps == 1 {
            return Ok(vec![k]);
        }
        let span = (k - 1) as f64 / (sample_steps - 1) as f64;
        Ok((0..sample_steps).rev().map(|j| 1 + (j as f64 * span).round() as usize).collect())
    }

    /// Constants `(c₀, c₁, c₂, σ)` of the update from `k` to `k_prev < k`.
    pub fn ddim_coefficients(&self, k: usize, k_prev: usize, eta: S) -> (S, S, S, S) {
        let ab = self.alpha_bar(k);
        let ab_prev = self.alpha_bar(k_prev);
        let one = S::one();
        let c0 = (ab_prev / ab).sqrt();
        let c1 = (one - ab).sqrt();
        let sigma = eta * ((one - ab_prev) / (one - ab)).sqrt() * (one - ab / ab_prev).max(S::zero()).sqrt();
        let c2 = (one - ab_prev - sigma * sigma).max(S::zero()).sqrt();
        (c0, c1, c2, sigma)
    }
}

/// Random draws used by one sampler invocation over a set of agents.
///
/// Each agent's prior and per-step noise come from a stream keyed by
/// `(seed, t, agent id)`, so a subset of agents reproduces exactly the
/// draws those agents receive in a run over the whole swarm.
#[derive(Debug, Clone)]
pub struct KeyedNoise {
    pub seed: u64,
    pub t: u64,
    pub ids: Vec<u64>,
}

impl KeyedNoise {
    pub fn prior<S: Scalar>(&self, cols: usize) -> Tensor<S> {
        let data = self.ids.iter().flat_map(|&id| normal_vec(&mut keyed_rng(self.seed, Stream::Prior, &[self.t, id]), cols)).collect();
        Tensor::new(&[self.ids.len(), cols], data).expect("prior shape")
    }

    pub fn step<S: Scalar>(&self, step: usize, cols: usize) -> Tensor<S> {
        let data = self
            .ids
            .iter()
            .flat_map(|&id| normal_vec(&mut keyed_rng(self.seed, Stream::SamplerNoise, &[self.t, id, step as u64]), cols))
            .collect();
        Tensor::new(&[self.ids.len(), cols], data).expect("noise shape")
    }

    /// Subset of agents (by position in `ids`).
    pub fn restrict(&self, idx: &[usize]) -> Self {
        Self { seed: self.seed, t: self.t, ids: idx.iter().map(|&i| self.ids[i]).collect() }
    }
}

/// DDIM reverse process from `prior = U_K` over the descending step list
/// `subset` (first element `K`, last element 1), finishing at step 0.
///
/// `eps_hat(U_k, k)` predicts the noise; `noise(j)` supplies fresh standard
/// normal noise for transition `j` and is only called when `σ > 0`.
pub fn ddim_sample_with<S, F, N>(
    schedule: &NoiseSchedule<S>,
    subset: &[usize],
    eta: S,
    prior: Tensor<S>,
    noise: N,
    eps_hat: F,
) -> Result<Tensor<S>>
where
    S: Scalar,
    F: FnMut(&Tensor<S>, usize) -> Result<Tensor<S>>,
    N: FnMut(usize) -> Tensor<S>,
{
    ddim_sample_clipped(schedule, subset, eta, None, prior, noise, eps_hat)
}

/// [`ddim_sample_with`] with the implied clean sample
/// `Û_0 = (U_k − √(1−ᾱ_k) ε̂) / √ᾱ_k` clamped to `[−clip, clip]` at every
/// step and `ε̂` recomputed from it. Without the clamp, a prior draw far in
/// the tail can push a deterministic trajectory off the training manifold.
pub fn ddim_sample_clipped<S, F, N>(
    schedule: &NoiseSchedule<S>,
    subset: &[usize],
    eta: S,
    clip: Option<S>,
    prior: Tensor<S>,
    mut noise: N,
    mut eps_hat: F,
) -> Result<Tensor<S>>
where
    S: Scalar,
    F: FnMut(&Tensor<S>, usize) -> Result<Tensor<S>>,
    N: FnMut(usize) -> Tensor<S>,
{
    if subset.is_empty() || subset.len() > schedule.steps() {
        return Err(contract_err!("sampling subset of {} steps for K = {}", subset.len(), schedule.steps()));
    }
    if subset[0] != schedule.steps() || subset.windows(2).any(|w| w[1] >= w[0]) || *subset.last().unwrap_or(&0) == 0 {
        return Err(contract_err!("sampling subset must descend strictly from K to a positive step"));
    }
    if eta < S::zero() || eta > S::one() {
        return Err(contract_err!("eta must lie in [0, 1]"));
    }
    if clip.is_some_and(|c| !(c > S::zero())) {
        return Err(contract_err!("clip bound must be positive"));
    }
    let mut u = prior;
    for (j, &k) in subset.iter().enumerate() {
        let k_prev = subset.get(j + 1).copied().unwrap_or(0);
        let mut e = eps_hat(&u, k)?;
        if e.shape() != u.shape() {
            return Err(shape_err!("noise prediction {:?} for actions {:?}", e.shape(), u.shape()));
        }
        let (c0, c1, c2, sigma) = schedule.ddim_coefficients(k, k_prev, eta);
        if let Some(c) = clip {
            let root_ab = schedule.alpha_bar(k).sqrt();
            e = u.zip_with(&e, |x, y| {
                let u0 = ((x - c1 * y) / root_ab).max(-c).min(c);
                (x - root_ab * u0) / c1
            })?;
        }
        let g = c2 - c0 * c1;
        u = u.zip_with(&e, |x, y| c0 * x + g * y)?;
        if sigma > S::zero() {
            let z = noise(j);
            u = u.zip_with(&z, |x, y| x + sigma * y)?;
        }
    }
    Ok(u)
}

/// Per-row uniform steps in `1..=K` (shared within each group of rows) and
/// standard normal noise, for one training batch.
pub fn draw_loss_inputs<S: Scalar, R: Rng + ?Sized>(
    schedule: &NoiseSchedule<S>,
    group_sizes: &[usize],
    cols: usize,
    rng: &mut R,
) -> (Vec<usize>, Tensor<S>) {
    let mut steps = Vec::new();
    for &g in group_sizes {
        let k = rng.random_range(1..=schedule.steps());
        steps.extend(std::iter::repeat_n(k, g));
    }
    let eps = Tensor::new(&[steps.len(), cols], normal_vec(rng, steps.len() * cols)).expect("noise shape");
    (steps, eps)
}

/// `mean ‖ε − ŝ(U_k)‖²` per coordinate, with `U_k` formed from `u0`, `steps`
/// and `eps`. The score closure receives `U_k` as a constant and the steps.
pub fn ddpm_loss_with<S, F>(
    tape: &mut Tape<S>,
    schedule: &NoiseSchedule<S>,
    u0: &Tensor<S>,
    steps: &[usize],
    eps: &Tensor<S>,
    score: F,
) -> Result<Var>
where
    S: Scalar,
    F: FnOnce(&mut Tape<S>, Var, &[usize]) -> Result<Var>,
{
    let uk = schedule.forward_sample_rows(u0, steps, eps)?;
    let uk = tape.constant(uk);
    let pred = score(tape, uk, steps)?;
    let target = tape.constant(eps.clone());
    tape.mse(pred, target)
}
