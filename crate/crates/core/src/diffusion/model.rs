use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{ddim_sample_clipped, draw_loss_inputs, ddpm_loss_with, DiffusionConfig, KeyedNoise, NoiseSchedule};
use crate::error::{shape_err, Error, Result};
use crate::ndtensor::{Bound, ParamStore, Tape, Tensor, Var};
use crate::perception::{build_observation, stack_observations, PerceptionConfig, PerceptionNet};
use crate::rng::{keyed_rng, Stream};
use crate::stformer::{build_mask, rope_phases, AttentionMask, Decoder, Encoder, RopeBasis, STConfig};
use crate::world::{CommGraph, SwarmState};
use crate::{clamp_norm, Point, Scalar};

/// Position features appended to each perceptual token.
pub const TOKEN_DIM_EXTRA: usize = 2;
const ACTION_DIM: usize = 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub perception: PerceptionConfig,
    pub transformer: STConfig,
    pub diffusion: DiffusionConfig,
    /// World side used to scale token positions to `[0, 1]`.
    pub side_length: f64,
    /// Speed that maps to a unit normalized action.
    pub action_scale: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            perception: PerceptionConfig::default(),
            transformer: STConfig::default(),
            diffusion: DiffusionConfig::default(),
            side_length: 1024.0,
            action_scale: 5.0,
        }
    }
}

impl ModelConfig {
    pub fn desk() -> Self {
        Self { transformer: STConfig::desk(), side_length: 256.0, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        self.transformer.validate()?;
        self.diffusion.validate()?;
        if !(self.side_length > 0.0) || !(self.action_scale > 0.0) {
            return Err(Error::Config("side_length and action_scale must be positive".into()));
        }
        Ok(())
    }
}

/// Centralized: one sampler over the whole swarm. Decentralized: every
/// robot samples over its own attention neighborhood and keeps its row.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExecutionMode {
    Centralized,
    #[default]
    Decentralized,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplerSettings {
    pub steps: usize,
    pub eta: f64,
    pub mode: ExecutionMode,
    /// Clean-action clamp, see [`ddim_sample_clipped`].
    pub clip: Option<f64>,
}

impl SamplerSettings {
    /// Inference settings stored in a diffusion configuration.
    pub fn from_config(cfg: &DiffusionConfig, mode: ExecutionMode) -> Self {
        Self { steps: cfg.sample_steps, eta: cfg.eta, mode, clip: cfg.clip_sample }
    }
}

/// A stack of independent samples sharing one token set.
#[derive(Debug, Clone)]
pub struct TrainBatch<S> {
    /// `[R, 4, 32, 32]`.
    pub obs: Tensor<S>,
    pub positions: Vec<Point<S>>,
    /// `[R, 2]`, normalized.
    pub actions: Tensor<S>,
    /// Block-diagonal over samples.
    pub mask: AttentionMask,
    /// Rows per sample.
    pub sizes: Vec<usize>,
}

/// Perception CNN, encoder and noise-predicting decoder with their
/// parameters.
#[derive(Debug, Clone)]
pub struct MadpModel<S> {
    config: ModelConfig,
    store: ParamStore<S>,
    cnn: PerceptionNet,
    encoder: Encoder,
    decoder: Decoder,
    schedule: NoiseSchedule<S>,
}

impl<S: Scalar> MadpModel<S> {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = keyed_rng(seed, Stream::Init, &[]);
        let mut store = ParamStore::new();
        let cnn = PerceptionNet::new(&mut store, "cnn", &config.perception, &mut rng)?;
        let token_dim = config.perception.token_dim + TOKEN_DIM_EXTRA;
        let encoder = Encoder::new(&mut store, "encoder", token_dim, &config.transformer, &mut rng)?;
        let decoder = Decoder::new(&mut store, "decoder", ACTION_DIM, &config.transformer, &mut rng)?;
        let schedule = NoiseSchedule::from_config(&config.diffusion)?;
        Ok(Self { config, store, cnn, encoder, decoder, schedule })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore<S> {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore<S> {
        &mut self.store
    }

    pub fn schedule(&self) -> &NoiseSchedule<S> {
        &self.schedule
    }

    pub fn decoder(&self) -> &Decoder {
        &self.decoder
    }

    pub fn encoder(&self) -> &Encoder {
        &self.encoder
    }

    pub fn rope(&self, positions: &[Point<S>]) -> Result<RopeBasis<S>> {
        rope_phases(positions, self.config.transformer.head_dim, self.config.transformer.rope_period)
    }

    pub fn mask(&self, positions: &[Point<S>], graph: &CommGraph) -> Result<AttentionMask> {
        build_mask(positions, graph, S::of(self.config.transformer.attention_radius))
    }

    /// `[z_i, x_i / side]` rows for observations `obs` (`[R, 4, 32, 32]`).
    pub fn tokens(&self, tape: &mut Tape<S>, p: &Bound, obs: Var, positions: &[Point<S>]) -> Result<Var> {
        let z = self.cnn.forward(tape, p, obs)?;
        if tape.shape(z)[0] != positions.len() {
            return Err(shape_err!("{} observations for {} positions", tape.shape(z)[0], positions.len()));
        }
        let side = S::of(self.config.side_length);
        let xs = positions.iter().flat_map(|p| [p[0] / side, p[1] / side]).collect();
        let x = tape.constant(Tensor::new(&[positions.len(), TOKEN_DIM_EXTRA], xs)?);
        tape.concat(&[z, x], 1)
    }

    /// Token matrix without gradient tracking.
    pub fn tokens_value(&self, obs: &Tensor<S>, positions: &[Point<S>]) -> Result<Tensor<S>> {
        let mut tape = Tape::new();
        let p = self.store.bind(&mut tape, false);
        let o = tape.constant(obs.clone());
        let t = self.tokens(&mut tape, &p, o, positions)?;
        Ok(tape.value(t).clone())
    }

    /// Mean per-coordinate noise-prediction error on `batch`, with steps and
    /// noise drawn from `rng`.
    pub fn loss<R: Rng + ?Sized>(&self, tape: &mut Tape<S>, p: &Bound, batch: &TrainBatch<S>, rng: &mut R) -> Result<Var> {
        let (steps, eps) = draw_loss_inputs(&self.schedule, &batch.sizes, ACTION_DIM, rng);
        self.loss_with(tape, p, batch, &steps, &eps)
    }

    pub fn loss_with(
        &self,
        tape: &mut Tape<S>,
        p: &Bound,
        batch: &TrainBatch<S>,
        steps: &[usize],
        eps: &Tensor<S>,
    ) -> Result<Var> {
        let rope = self.rope(&batch.positions)?;
        let obs = tape.constant(batch.obs.clone());
        let tokens = self.tokens(tape, p, obs, &batch.positions)?;
        let cond = self.encoder.forward(tape, p, tokens, &rope, &batch.mask, None)?;
        ddpm_loss_with(tape, &self.schedule, &batch.actions, steps, eps, |tape, uk, steps| {
            self.decoder.forward(tape, p, uk, cond, &rope, &batch.mask, steps)
        })
    }

    /// Runs the reverse process for one agent set. `tokens` is `N × 34`.
    /// Returns normalized actions `N × 2`.
    pub fn sample(
        &self,
        tokens: &Tensor<S>,
        positions: &[Point<S>],
        mask: &AttentionMask,
        noise: &KeyedNoise,
        settings: &SamplerSettings,
    ) -> Result<Tensor<S>> {
        let n = positions.len();
        if tokens.dims2()?.0 != n || noise.ids.len() != n || mask.len() != n {
            return Err(shape_err!("sampler inputs disagree on the number of agents"));
        }
        let rope = self.rope(positions)?;
        let mut tape = Tape::new();
        let p = self.store.bind(&mut tape, false);
        let t = tape.constant(tokens.clone());
        let cond = self.encoder.forward(&mut tape, &p, t, &rope, mask, None)?;
        let cond = tape.value(cond).clone();
        let subset = self.schedule.ddim_subset(settings.steps)?;
        ddim_sample_clipped(
            &self.schedule,
            &subset,
            S::of(settings.eta),
            settings.clip.map(S::of),
            noise.prior(ACTION_DIM),
            |j| noise.step(j, ACTION_DIM),
            |u, k| {
                let mut tape = Tape::new();
                let p = self.store.bind(&mut tape, false);
                let c = tape.constant(cond.clone());
                let uk = tape.constant(u.clone());
                let e = self.decoder.forward(&mut tape, &p, uk, c, &rope, mask, &vec![k; n])?;
                Ok(tape.value(e).clone())
            },
        )
    }

    /// Velocity commands for every robot at the current state.
    pub fn act(
        &self,
        state: &SwarmState<S>,
        graph: &CommGraph,
        sample_seed: u64,
        settings: &SamplerSettings,
    ) -> Result<Vec<Point<S>>> {
        let n = state.num_robots();
        let positions = state.positions();
        let obs = (0..n).map(|i| build_observation(state, i, graph)).collect::<Result<Vec<_>>>()?;
        let obs = stack_observations(obs.iter().map(|o| &o.maps))?;
        let tokens = self.tokens_value(&obs, positions)?;
        let mask = self.mask(positions, graph)?;
        let noise = KeyedNoise { seed: sample_seed, t: state.time() as u64, ids: (0..n as u64).collect() };
        let normalized = match settings.mode {
            ExecutionMode::Centralized => self.sample(&tokens, positions, &mask, &noise, settings)?,
            ExecutionMode::Decentralized => {
                let mut rows = Vec::with_capacity(n * ACTION_DIM);
                for i in 0..n {
                    let idx = mask.row_members(i);
                    let own = idx.iter().position(|&j| j == i).expect("diagonal is always attended");
                    let sub_tokens = Tensor::from_rows(&idx.iter().map(|&j| tokens.row(j).to_vec()).collect::<Vec<_>>())?;
                    let sub_pos: Vec<_> = idx.iter().map(|&j| positions[j]).collect();
                    let u = self.sample(&sub_tokens, &sub_pos, &mask.restrict(&idx), &noise.restrict(&idx), settings)?;
                    rows.extend_from_slice(u.row(own));
                }
                Tensor::new(&[n, ACTION_DIM], rows)?
            }
        };
        let scale = S::of(self.config.action_scale);
        let u_max = S::of(state.config().u_max);
        let actions: Vec<Point<S>> =
            (0..n).map(|i| clamp_norm([normalized.at2(i, 0) * scale, normalized.at2(i, 1) * scale], u_max)).collect();
        if actions.iter().any(|a| !a[0].is_finite() || !a[1].is_finite()) {
            return Err(Error::NonFinite("policy produced a non-finite action".into()));
        }
        Ok(actions)
    }

    /// Writes the parameters plus the model configuration to `dir`.
    pub fn save(&self, dir: &Path, extra: serde_json::Value) -> Result<()> {
        let meta = serde_json::json!({ "model": self.config, "extra": extra });
        self.store.save(dir, meta)
    }

    /// Rebuilds a model from a directory written by [`MadpModel::save`].
    /// Returns the extra metadata too.
    pub fn load(dir: &Path) -> Result<(Self, serde_json::Value)> {
        let (loaded, meta) = ParamStore::<S>::load(dir)?;
        let config: ModelConfig = serde_json::from_value(meta["model"].clone())?;
        let mut model = Self::new(config, 0)?;
        if loaded.len() != model.store.len() {
            return Err(Error::Format(format!(
                "checkpoint has {} tensors, model expects {}",
                loaded.len(),
                model.store.len()
            )));
        }
        model.store.load_values_from(&loaded)?;
        Ok((model, meta["extra"].clone()))
    }
}
