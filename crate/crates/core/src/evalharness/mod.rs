//! Closed-loop evaluation: policies, rollouts and the experiment suites.

mod stats;
mod suites;

pub use stats::{confidence_band, mean_stderr, percent_difference, BandPoint, BoxStats};
pub use suites::{
    init_scenarios, run_seeds, scalability_grid, sigma_sweep, trajectory_fan, write_fan_csv, write_grid_csv,
    write_init_csv, write_rollouts_csv, write_sigma_csv, FanRun, GridCell, ScenarioRow, SigmaRow,
};

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::coverage::coverage_cost;
use crate::diffusion::{MadpModel, SamplerSettings};
use crate::error::{Error, Result};
use crate::experts::{clairvoyant_action, dcvt_action};
use crate::rng::{derive_seed, keyed_rng, Stream};
use crate::world::{CommGraph, ImportanceField, Rect, SwarmState, WorldConfig};
use crate::Point;

/// What a policy sees at one step. `field` is the ground truth and only
/// legitimate for the clairvoyant expert.
pub struct PolicyContext<'a> {
    pub state: &'a SwarmState<f64>,
    pub field: &'a ImportanceField<f64>,
    pub graph: &'a CommGraph,
    /// Rollout seed.
    pub seed: u64,
    /// Repetition index for stochastic policies on a fixed environment.
    pub run: u64,
}

pub trait Policy: Sync {
    fn name(&self) -> String;
    fn act(&self, ctx: &PolicyContext<'_>) -> Result<Vec<Point<f64>>>;
}

/// Stands still.
pub struct ZeroPolicy;

impl Policy for ZeroPolicy {
    fn name(&self) -> String {
        "zero".into()
    }

    fn act(&self, ctx: &PolicyContext<'_>) -> Result<Vec<Point<f64>>> {
        Ok(vec![[0.0, 0.0]; ctx.state.num_robots()])
    }
}

/// Uniformly random velocity in the disc of radius `u_max`.
pub struct RandomPolicy;

impl Policy for RandomPolicy {
    fn name(&self) -> String {
        "random".into()
    }

    fn act(&self, ctx: &PolicyContext<'_>) -> Result<Vec<Point<f64>>> {
        let u_max = ctx.state.config().u_max;
        let t = ctx.state.time() as u64;
        Ok((0..ctx.state.num_robots() as u64)
            .map(|i| {
                let mut rng = keyed_rng(ctx.seed, Stream::RandomPolicy, &[ctx.run, t, i]);
                let r = u_max * rng.random::<f64>().sqrt();
                let a = rng.random_range(0.0..std::f64::consts::TAU);
                [r * a.cos(), r * a.sin()]
            })
            .collect())
    }
}

pub struct ClairvoyantPolicy;

impl Policy for ClairvoyantPolicy {
    fn name(&self) -> String {
        "clairvoyant".into()
    }

    fn act(&self, ctx: &PolicyContext<'_>) -> Result<Vec<Point<f64>>> {
        let c = ctx.state.config();
        clairvoyant_action(ctx.state.positions(), ctx.field, c.u_max, c.dt)
    }
}

pub struct DcvtPolicy;

impl Policy for DcvtPolicy {
    fn name(&self) -> String {
        "dcvt".into()
    }

    fn act(&self, ctx: &PolicyContext<'_>) -> Result<Vec<Point<f64>>> {
        Ok(dcvt_action(ctx.state, ctx.graph))
    }
}

/// The learned diffusion policy.
pub struct MadpPolicy {
    pub model: Arc<MadpModel<f64>>,
    pub settings: SamplerSettings,
}

impl MadpPolicy {
    pub fn new(model: Arc<MadpModel<f64>>) -> Self {
        let settings = SamplerSettings::from_config(&model.config().diffusion, Default::default());
        Self { model, settings }
    }
}

impl Policy for MadpPolicy {
    fn name(&self) -> String {
        "madp".into()
    }

    fn act(&self, ctx: &PolicyContext<'_>) -> Result<Vec<Point<f64>>> {
        let sample_seed = derive_seed(ctx.seed, Stream::Rollout, &[ctx.run]);
        self.model.act(ctx.state, ctx.graph, sample_seed, &self.settings)
    }
}

/// Named policy constructor for the non-learned policies.
pub fn baseline_policy(name: &str) -> Result<Box<dyn Policy>> {
    Ok(match name {
        "zero" => Box::new(ZeroPolicy),
        "random" => Box::new(RandomPolicy),
        "clairvoyant" => Box::new(ClairvoyantPolicy),
        "dcvt" => Box::new(DcvtPolicy),
        other => return Err(Error::Config(format!("unknown policy {other}"))),
    })
}

/// Initial-position distributions. Geometry is given for a 1024 m world and
/// scaled linearly with `side_length`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scenario {
    Uniform,
    Square,
    Line,
}

impl Scenario {
    pub const ALL: [Scenario; 3] = [Scenario::Uniform, Scenario::Square, Scenario::Line];

    pub fn name(self) -> &'static str {
        match self {
            Scenario::Uniform => "uniform",
            Scenario::Square => "square",
            Scenario::Line => "line",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown scenario {s}; expected uniform, square or line")))
    }

    pub fn rect(self, side_length: f64) -> Rect {
        let k = side_length / 1024.0;
        match self {
            Scenario::Uniform => Rect::square(side_length),
            Scenario::Square => Rect { x: [115.25 * k, 217.25 * k], y: [115.25 * k, 217.25 * k] },
            Scenario::Line => Rect { x: [0.0, side_length], y: [96.0 * k, 352.0 * k] },
        }
    }
}

/// Field and initial swarm for evaluation seed `seed`.
pub fn environment(world: &WorldConfig, scenario: Scenario, seed: u64) -> Result<(ImportanceField<f64>, SwarmState<f64>)> {
    world.validate()?;
    let field = ImportanceField::generate(world, &mut keyed_rng(seed, Stream::Field, &[]));
    let pos = scenario.rect(world.side_length).sample(world.num_robots, &mut keyed_rng(seed, Stream::InitialPositions, &[]));
    let state = SwarmState::new(world, pos, &field)?;
    Ok((field, state))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutRecord {
    pub policy: String,
    pub seed: u64,
    pub run: u64,
    pub scenario: Scenario,
    pub world: WorldConfig,
    /// `J(X(t))` for `t = 0..=T`.
    pub costs: Vec<f64>,
    /// `J(X(t)) / J(X(0))`.
    pub normalized: Vec<f64>,
    /// Positions at every step, `T + 1` entries.
    pub trajectory: Vec<Vec<Point<f64>>>,
}

impl RolloutRecord {
    pub fn final_normalized(&self) -> f64 {
        *self.normalized.last().expect("a record has at least one entry")
    }
}

/// Closed-loop run of `policy` for `steps` steps on environment `seed`.
pub fn rollout(policy: &dyn Policy, world: &WorldConfig, scenario: Scenario, steps: usize, seed: u64) -> Result<RolloutRecord> {
    let (field, state) = environment(world, scenario, seed)?;
    rollout_from(policy, &field, state, scenario, steps, seed, 0)
}

/// Like [`rollout`] but from a given environment and repetition index.
pub fn rollout_from(
    policy: &dyn Policy,
    field: &ImportanceField<f64>,
    mut state: SwarmState<f64>,
    scenario: Scenario,
    steps: usize,
    seed: u64,
    run: u64,
) -> Result<RolloutRecord> {
    let mut costs = Vec::with_capacity(steps + 1);
    let mut trajectory = Vec::with_capacity(steps + 1);
    costs.push(coverage_cost(state.positions(), field)?);
    trajectory.push(state.positions().to_vec());
    for _ in 0..steps {
        let graph = CommGraph::build(state.positions(), state.config().comm_radius);
        let ctx = PolicyContext { state: &state, field, graph: &graph, seed, run };
        let u = policy.act(&ctx)?;
        state.step(&u, field)?;
        let c = coverage_cost(state.positions(), field)?;
        if !c.is_finite() {
            return Err(Error::NonFinite(format!("coverage cost at t = {}", state.time())));
        }
        costs.push(c);
        trajectory.push(state.positions().to_vec());
    }
    let j0 = costs[0];
    let normalized = costs.iter().map(|&c| if j0 > 0.0 { c / j0 } else { 1.0 }).collect();
    Ok(RolloutRecord {
        policy: policy.name(),
        seed,
        run,
        scenario,
        world: state.config().clone(),
        costs,
        normalized,
        trajectory,
    })
}
