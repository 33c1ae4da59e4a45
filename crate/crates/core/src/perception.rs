//! Per-robot local observations and the convolutional encoder that turns
//! them into perceptual tokens.
//!
//! An observation is a `4 × 32 × 32` stack cropped from the robot's
//! `local_map_span` window: known importance, out-of-world boundary,
//! neighbors' x offsets and neighbors' y offsets.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Result};
use crate::ndtensor::nn::{uniform_init, Linear};
use crate::ndtensor::{bilinear_downsample, Bound, Conv2dSpec, ParamId, ParamStore, Tape, Tensor, Var};
use crate::world::{CommGraph, SwarmState};
use crate::{Point, Scalar};

/// Side of the downsampled local maps, in pixels.
pub const OBS_SIZE: usize = 32;
pub const OBS_CHANNELS: usize = 4;
pub const CH_DENSITY: usize = 0;
pub const CH_BOUNDARY: usize = 1;
pub const CH_NEIGHBOR_X: usize = 2;
pub const CH_NEIGHBOR_Y: usize = 3;

#[derive(Debug, Clone, PartialEq)]
pub struct LocalObservation<S> {
    /// `[4, 32, 32]`, row index is y.
    pub maps: Tensor<S>,
    pub position: Point<S>,
}

impl<S: Scalar> LocalObservation<S> {
    pub fn channel(&self, c: usize) -> &[S] {
        &self.maps.data()[c * OBS_SIZE * OBS_SIZE..(c + 1) * OBS_SIZE * OBS_SIZE]
    }
}

/// Builds robot `robot`'s observation from its own map and its one-hop
/// neighbors' positions.
pub fn build_observation<S: Scalar>(state: &SwarmState<S>, robot: usize, graph: &CommGraph) -> Result<LocalObservation<S>> {
    let cfg = state.config();
    let n = cfg.grid_cells() as isize;
    let window = (cfg.local_map_span / cfg.resolution).round() as usize;
    if window < OBS_SIZE {
        return Err(shape_err!("local map of {window} cells is smaller than {OBS_SIZE}"));
    }
    let x = state.positions()[robot];
    let res = S::of(cfg.resolution);
    let cell = |v: S| (v / res).floor().to_isize().unwrap_or(0).clamp(0, n);
    let ox = cell(x[0]) - (window / 2) as isize;
    let oy = cell(x[1]) - (window / 2) as isize;

    let known = state.known_idf(robot);
    let mut crop = vec![S::zero(); 2 * window * window];
    for wy in 0..window {
        let gy = oy + wy as isize;
        for wx in 0..window {
            let gx = ox + wx as isize;
            let k = wy * window + wx;
            if gx < 0 || gy < 0 || gx >= n || gy >= n {
                crop[window * window + k] = S::one();
            } else {
                crop[k] = known[(gy * n + gx) as usize];
            }
        }
    }
    let small = bilinear_downsample(&Tensor::new(&[2, window, window], crop)?, OBS_SIZE, OBS_SIZE)?;

    let plane = OBS_SIZE * OBS_SIZE;
    let mut maps = vec![S::zero(); OBS_CHANNELS * plane];
    maps[..2 * plane].copy_from_slice(small.data());

    let span = S::of(cfg.local_map_span);
    let origin = [S::of(ox as f64) * res, S::of(oy as f64) * res];
    let scale = S::of_usize(OBS_SIZE) / span;
    for &j in graph.neighbors(robot) {
        let p = state.positions()[j];
        let px = ((p[0] - origin[0]) * scale).floor();
        let py = ((p[1] - origin[1]) * scale).floor();
        let lim = S::of_usize(OBS_SIZE);
        if px < S::zero() || py < S::zero() || px >= lim || py >= lim {
            continue;
        }
        let k = py.to_usize().unwrap_or(0) * OBS_SIZE + px.to_usize().unwrap_or(0);
        maps[CH_NEIGHBOR_X * plane + k] += (p[0] - x[0]) / span;
        maps[CH_NEIGHBOR_Y * plane + k] += (p[1] - x[1]) / span;
    }
    Ok(LocalObservation { maps: Tensor::new(&[OBS_CHANNELS, OBS_SIZE, OBS_SIZE], maps)?, position: x })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PerceptionConfig {
    /// Output channels of the three convolutions.
    pub channels: [usize; 3],
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub token_dim: usize,
}

impl Default for PerceptionConfig {
    fn default() -> Self {
        Self { channels: [8, 16, 32], kernel: 3, stride: 2, padding: 1, token_dim: 32 }
    }
}

/// Three strided convolutions with leaky ReLU, spatial mean pool and a final
/// linear projection to the token dimension.
#[derive(Debug, Clone)]
pub struct PerceptionNet {
    config: PerceptionConfig,
    convs: [(ParamId, ParamId); 3],
    proj: Linear,
}

impl PerceptionNet {
    pub fn new<S: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<S>,
        prefix: &str,
        config: &PerceptionConfig,
        rng: &mut R,
    ) -> Result<Self> {
        let mut in_ch = OBS_CHANNELS;
        let k = config.kernel;
        let mut convs = Vec::with_capacity(3);
        for (i, &out_ch) in config.channels.iter().enumerate() {
            let fan_in = in_ch * k * k;
            let w = store.add(format!("{prefix}.conv{i}.weight"), uniform_init(&[out_ch, in_ch, k, k], fan_in, rng))?;
            let b = store.add(format!("{prefix}.conv{i}.bias"), Tensor::zeros(&[out_ch]))?;
            convs.push((w, b));
            in_ch = out_ch;
        }
        let proj = Linear::new(store, &format!("{prefix}.proj"), in_ch, config.token_dim, rng)?;
        Ok(Self { config: config.clone(), convs: [convs[0], convs[1], convs[2]], proj })
    }

    pub fn config(&self) -> &PerceptionConfig {
        &self.config
    }

    /// `[B, 4, 32, 32]` → `[B, token_dim]`.
    pub fn forward<S: Scalar>(&self, tape: &mut Tape<S>, p: &Bound, obs: Var) -> Result<Var> {
        match tape.shape(obs) {
            [_, OBS_CHANNELS, OBS_SIZE, OBS_SIZE] => {}
            s => return Err(shape_err!("perception expects [B,4,32,32], got {:?}", s)),
        }
        let spec = Conv2dSpec { stride: self.config.stride, padding: self.config.padding };
        let mut h = obs;
        for &(w, b) in &self.convs {
            h = tape.conv2d(h, p.var(w), p.var(b), spec)?;
            h = tape.leaky_relu(h);
        }
        let pooled = tape.mean_pool(h)?;
        self.proj.forward(tape, p, pooled)
    }
}

/// Stacks observation maps into a `[B, 4, 32, 32]` tensor.
pub fn stack_observations<'a, S: Scalar>(obs: impl IntoIterator<Item = &'a Tensor<S>>) -> Result<Tensor<S>> {
    let mut data = Vec::new();
    let mut b = 0;
    for o in obs {
        if o.shape() != [OBS_CHANNELS, OBS_SIZE, OBS_SIZE] {
            return Err(shape_err!("observation shape {:?}", o.shape()));
        }
        data.extend_from_slice(o.data());
        b += 1;
    }
    Tensor::new(&[b, OBS_CHANNELS, OBS_SIZE, OBS_SIZE], data)
}

/// Token for a single observation (inference convenience).
pub fn encode<S: Scalar>(net: &PerceptionNet, store: &ParamStore<S>, obs: &LocalObservation<S>) -> Result<Vec<S>> {
    let mut tape = Tape::new();
    let p = store.bind(&mut tape, false);
    let x = tape.constant(stack_observations([&obs.maps])?);
    let z = net.forward(&mut tape, &p, x)?;
    Ok(tape.value(z).data().to_vec())
}
