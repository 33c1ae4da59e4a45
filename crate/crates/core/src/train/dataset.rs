//! Expert demonstrations: observations, positions and normalized clairvoyant
//! actions sampled from rollouts on random fields.

use std::fs;
use std::path::Path;

use rand::seq::index::sample as sample_indices;
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diffusion::TrainBatch;
use crate::error::{contract_err, shape_err, Error, Result};
use crate::experts::clairvoyant_action;
use crate::ndtensor::Tensor;
use crate::perception::{build_observation, OBS_CHANNELS, OBS_SIZE};
use crate::rng::{keyed_rng, Stream};
use crate::stformer::{build_mask, AttentionMask};
use crate::world::{CommGraph, ImportanceField, Rect, SwarmState, WorldConfig};

const OBS_LEN: usize = OBS_CHANNELS * OBS_SIZE * OBS_SIZE;
const DATASET_FORMAT: &str = "madp-dataset-v1";
pub const DATASET_MANIFEST: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenerateConfig {
    pub examples: usize,
    /// Length of each expert rollout; every step is a candidate row.
    pub rollout_steps: usize,
    /// Rows drawn (without replacement) from each rollout.
    pub rows_per_rollout: usize,
    /// Train / validation / test fractions.
    pub split: [f64; 3],
    pub seed: u64,
}

impl Default for GenerateConfig {
    fn default() -> Self {
        Self { examples: 100_000, rollout_steps: 600, rows_per_rollout: 20, split: [0.7, 0.2, 0.1], seed: 0 }
    }
}

impl GenerateConfig {
    pub fn desk() -> Self {
        Self { examples: 2000, rollout_steps: 150, rows_per_rollout: 10, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.rollout_steps == 0 || self.rows_per_rollout == 0 {
            return Err(Error::Config("rollout_steps and rows_per_rollout must be positive".into()));
        }
        if self.rows_per_rollout > self.rollout_steps {
            return Err(Error::Config("rows_per_rollout cannot exceed rollout_steps".into()));
        }
        if self.split.iter().any(|&s| !(s >= 0.0)) || (self.split.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::Config("split fractions must be non-negative and sum to 1".into()));
        }
        Ok(())
    }
}

/// Where an example came from, enough to regenerate it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExampleMeta {
    pub rollout: u64,
    pub t: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Splits {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

impl Splits {
    /// Shuffles `0..m` and cuts it by `ratio` (rounded, remainder to test).
    pub fn new(m: usize, ratio: [f64; 3], seed: u64) -> Self {
        let mut idx: Vec<usize> = (0..m).collect();
        idx.shuffle(&mut keyed_rng(seed, Stream::Shuffle, &[u64::MAX]));
        let n_train = ((m as f64) * ratio[0]).round() as usize;
        let n_val = (((m as f64) * ratio[1]).round() as usize).min(m - n_train);
        let mut train = idx[..n_train].to_vec();
        let mut val = idx[n_train..n_train + n_val].to_vec();
        let mut test = idx[n_train + n_val..].to_vec();
        train.sort_unstable();
        val.sort_unstable();
        test.sort_unstable();
        Self { train, val, test }
    }

    pub fn sizes(&self) -> [usize; 3] {
        [self.train.len(), self.val.len(), self.test.len()]
    }
}

/// `M` examples of `N` robots each, stored as flat `f64` arrays.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub world: WorldConfig,
    pub generate: GenerateConfig,
    pub examples: Vec<ExampleMeta>,
    pub splits: Splits,
    obs: Vec<f64>,
    positions: Vec<f64>,
    actions: Vec<f64>,
}

/// One example's arrays.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    /// `N × 4 × 32 × 32`.
    pub obs: Vec<f64>,
    /// `N × 2`.
    pub positions: Vec<[f64; 2]>,
    /// `N × 2`, expert velocity divided by `u_max`.
    pub actions: Vec<[f64; 2]>,
}

/// Field and starting swarm of expert rollout `r`.
pub fn rollout_start(world: &WorldConfig, seed: u64, r: u64) -> Result<(ImportanceField<f64>, SwarmState<f64>)> {
    let field = ImportanceField::generate(world, &mut keyed_rng(seed, Stream::Field, &[r]));
    let pos = Rect::square(world.side_length).sample(world.num_robots, &mut keyed_rng(seed, Stream::InitialPositions, &[r]));
    let state = SwarmState::new(world, pos, &field)?;
    Ok((field, state))
}

/// Runs the clairvoyant expert on rollout `r` and records the steps in
/// `rows` (ascending).
fn record_rollout(world: &WorldConfig, seed: u64, r: u64, rows: &[usize]) -> Result<Vec<Example>> {
    let (field, mut state) = rollout_start(world, seed, r)?;
    let mut out = Vec::with_capacity(rows.len());
    let mut next = rows.iter().peekable();
    let last = rows.last().copied().unwrap_or(0);
    for t in 0..=last {
        let u = clairvoyant_action(state.positions(), &field, world.u_max, world.dt)?;
        if next.peek() == Some(&&t) {
            next.next();
            let graph = CommGraph::build(state.positions(), world.comm_radius);
            let mut obs = Vec::with_capacity(world.num_robots * OBS_LEN);
            for i in 0..world.num_robots {
                obs.extend_from_slice(build_observation(&state, i, &graph)?.maps.data());
            }
            let norm = |v: f64| if world.u_max > 0.0 { v / world.u_max } else { 0.0 };
            out.push(Example {
                obs,
                positions: state.positions().to_vec(),
                actions: u.iter().map(|a| [norm(a[0]), norm(a[1])]).collect(),
            });
        }
        if t < last {
            state.step(&u, &field)?;
        }
    }
    Ok(out)
}

/// Rebuilds one example from its metadata.
pub fn regenerate_example(world: &WorldConfig, seed: u64, meta: ExampleMeta) -> Result<Example> {
    let mut v = record_rollout(world, seed, meta.rollout, &[meta.t])?;
    Ok(v.remove(0))
}

/// Rolls out the clairvoyant expert on fresh random fields until
/// `gen.examples` rows are collected.
pub fn generate_dataset(world: &WorldConfig, gen: &GenerateConfig) -> Result<Dataset> {
    world.validate()?;
    gen.validate()?;
    let m = gen.examples;
    let rollouts = m.div_ceil(gen.rows_per_rollout);
    let plans: Vec<(u64, Vec<usize>)> = (0..rollouts)
        .map(|r| {
            let quota = gen.rows_per_rollout.min(m - r * gen.rows_per_rollout);
            let mut rng = keyed_rng(gen.seed, Stream::DatasetRows, &[r as u64]);
            let mut rows = sample_indices(&mut rng, gen.rollout_steps, quota).into_vec();
            rows.sort_unstable();
            (r as u64, rows)
        })
        .collect();
    let recorded = plans
        .par_iter()
        .map(|(r, rows)| record_rollout(world, gen.seed, *r, rows))
        .collect::<Result<Vec<_>>>()?;
    let n = world.num_robots;
    let mut ds = Dataset {
        world: world.clone(),
        generate: gen.clone(),
        examples: Vec::with_capacity(m),
        splits: Splits::new(m, gen.split, gen.seed),
        obs: Vec::with_capacity(m * n * OBS_LEN),
        positions: Vec::with_capacity(m * n * 2),
        actions: Vec::with_capacity(m * n * 2),
    };
    for ((r, rows), exs) in plans.iter().zip(recorded) {
        for (&t, ex) in rows.iter().zip(exs) {
            ds.examples.push(ExampleMeta { rollout: *r, t });
            ds.push(ex);
        }
    }
    Ok(ds)
}

#[derive(Debug, Serialize, Deserialize)]
struct Blobs {
    observations: String,
    positions: String,
    actions: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    format: String,
    dtype: String,
    num_examples: usize,
    num_robots: usize,
    observation_shape: [usize; 3],
    split_sizes: [usize; 3],
    world: WorldConfig,
    generate: GenerateConfig,
    splits: Splits,
    examples: Vec<ExampleMeta>,
    blobs: Blobs,
}

fn write_f64s(path: &Path, v: &[f64]) -> Result<()> {
    let mut bytes = Vec::with_capacity(v.len() * 8);
    for x in v {
        bytes.extend_from_slice(&x.to_le_bytes());
    }
    fs::write(path, bytes)?;
    Ok(())
}

fn read_f64s(path: &Path, expect: usize) -> Result<Vec<f64>> {
    let bytes = fs::read(path)?;
    if bytes.len() != expect * 8 {
        return Err(Error::Format(format!("{} holds {} bytes, expected {}", path.display(), bytes.len(), expect * 8)));
    }
    Ok(bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk"))).collect())
}

impl Dataset {
    fn push(&mut self, ex: Example) {
        self.obs.extend_from_slice(&ex.obs);
        self.positions.extend(ex.positions.iter().flatten());
        self.actions.extend(ex.actions.iter().flatten());
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn num_robots(&self) -> usize {
        self.world.num_robots
    }

    pub fn example(&self, i: usize) -> Example {
        let n = self.num_robots();
        let pair = |v: &[f64]| v.chunks_exact(2).map(|c| [c[0], c[1]]).collect();
        Example {
            obs: self.obs[i * n * OBS_LEN..(i + 1) * n * OBS_LEN].to_vec(),
            positions: pair(&self.positions[i * n * 2..(i + 1) * n * 2]),
            actions: pair(&self.actions[i * n * 2..(i + 1) * n * 2]),
        }
    }

    /// Stacks examples `idx` into one block-masked batch.
    pub fn batch(&self, idx: &[usize], attention_radius: f64) -> Result<TrainBatch<f64>> {
        if idx.is_empty() {
            return Err(contract_err!("empty batch"));
        }
        let n = self.num_robots();
        let mut obs = Vec::with_capacity(idx.len() * n * OBS_LEN);
        let mut positions = Vec::with_capacity(idx.len() * n);
        let mut actions = Vec::with_capacity(idx.len() * n * 2);
        let mut masks = Vec::with_capacity(idx.len());
        for &i in idx {
            if i >= self.len() {
                return Err(shape_err!("example {i} out of {}", self.len()));
            }
            let ex = self.example(i);
            let graph = CommGraph::build(&ex.positions, self.world.comm_radius);
            masks.push(build_mask(&ex.positions, &graph, attention_radius)?);
            obs.extend_from_slice(&ex.obs);
            positions.extend_from_slice(&ex.positions);
            actions.extend(ex.actions.iter().flatten());
        }
        let rows = idx.len() * n;
        Ok(TrainBatch {
            obs: Tensor::new(&[rows, OBS_CHANNELS, OBS_SIZE, OBS_SIZE], obs)?,
            positions,
            actions: Tensor::new(&[rows, 2], actions)?,
            mask: AttentionMask::block_diag(&masks),
            sizes: vec![n; idx.len()],
        })
    }

    /// Writes `manifest.json` plus three little-endian `f64` blobs into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let blobs = Blobs {
            observations: "observations.f64".into(),
            positions: "positions.f64".into(),
            actions: "actions.f64".into(),
        };
        write_f64s(&dir.join(&blobs.observations), &self.obs)?;
        write_f64s(&dir.join(&blobs.positions), &self.positions)?;
        write_f64s(&dir.join(&blobs.actions), &self.actions)?;
        let manifest = Manifest {
            format: DATASET_FORMAT.into(),
            dtype: "f64-le".into(),
            num_examples: self.len(),
            num_robots: self.num_robots(),
            observation_shape: [OBS_CHANNELS, OBS_SIZE, OBS_SIZE],
            split_sizes: self.splits.sizes(),
            world: self.world.clone(),
            generate: self.generate.clone(),
            splits: self.splits.clone(),
            examples: self.examples.clone(),
            blobs,
        };
        fs::write(dir.join(DATASET_MANIFEST), serde_json::to_string_pretty(&manifest)?)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let m: Manifest = serde_json::from_str(&fs::read_to_string(dir.join(DATASET_MANIFEST))?)?;
        if m.format != DATASET_FORMAT || m.dtype != "f64-le" {
            return Err(Error::Format(format!("unsupported dataset {} / {}", m.format, m.dtype)));
        }
        if m.observation_shape != [OBS_CHANNELS, OBS_SIZE, OBS_SIZE] || m.examples.len() != m.num_examples {
            return Err(Error::Format("dataset manifest is inconsistent".into()));
        }
        let (e, n) = (m.num_examples, m.num_robots);
        let all = m.splits.train.iter().chain(&m.splits.val).chain(&m.splits.test);
        if all.clone().any(|&i| i >= e) || all.count() != e {
            return Err(Error::Format("dataset splits do not partition the examples".into()));
        }
        let mut world = m.world;
        world.num_robots = n;
        Ok(Self {
            obs: read_f64s(&dir.join(&m.blobs.observations), e * n * OBS_LEN)?,
            positions: read_f64s(&dir.join(&m.blobs.positions), e * n * 2)?,
            actions: read_f64s(&dir.join(&m.blobs.actions), e * n * 2)?,
            world,
            generate: m.generate,
            examples: m.examples,
            splits: m.splits,
        })
    }
}
