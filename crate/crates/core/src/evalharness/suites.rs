use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::stats::{mean_stderr, percent_difference, BoxStats};
use super::{environment, rollout, rollout_from, Policy, RolloutRecord, Scenario};
use crate::error::{contract_err, Error, Result};
use crate::world::WorldConfig;
use crate::Point;

/// Maps `f` over `items` on a pool of `jobs` threads, keeping input order.
fn par_map<T: Sync, U: Send>(jobs: usize, items: &[T], f: impl Fn(&T) -> Result<U> + Sync) -> Result<Vec<U>> {
    if jobs <= 1 {
        return items.iter().map(f).collect();
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    pool.install(|| items.par_iter().map(&f).collect())
}

/// One rollout per seed.
pub fn run_seeds(
    policy: &dyn Policy,
    world: &WorldConfig,
    scenario: Scenario,
    steps: usize,
    seeds: &[u64],
    jobs: usize,
) -> Result<Vec<RolloutRecord>> {
    par_map(jobs, seeds, |&s| rollout(policy, world, scenario, steps, s))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SigmaRow {
    pub sigma_range: [f64; 2],
    pub policy: String,
    pub finals: Vec<f64>,
    pub stats: BoxStats,
}

/// Final normalized cost distribution of each policy for each feature-size
/// range, over the same seeds.
pub fn sigma_sweep(
    policies: &[&dyn Policy],
    world: &WorldConfig,
    ranges: &[[f64; 2]],
    seeds: &[u64],
    steps: usize,
    jobs: usize,
) -> Result<Vec<SigmaRow>> {
    if seeds.is_empty() {
        return Err(contract_err!("sigma sweep needs at least one seed"));
    }
    let mut rows = Vec::new();
    for &range in ranges {
        let w = WorldConfig { sigma_range: range, ..world.clone() };
        w.validate()?;
        for p in policies {
            let finals: Vec<f64> =
                run_seeds(*p, &w, Scenario::Uniform, steps, seeds, jobs)?.iter().map(|r| r.final_normalized()).collect();
            let stats = BoxStats::of(&finals).expect("non-empty seeds");
            rows.push(SigmaRow { sigma_range: range, policy: p.name(), finals, stats });
        }
    }
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioRow {
    pub scenario: Scenario,
    pub policy: String,
    pub n: usize,
    pub mean: f64,
    pub stderr: f64,
    pub finals: Vec<f64>,
}

/// Mean ± standard error of the final normalized cost per scenario and policy.
pub fn init_scenarios(
    policies: &[&dyn Policy],
    world: &WorldConfig,
    scenarios: &[Scenario],
    seeds: &[u64],
    steps: usize,
    jobs: usize,
) -> Result<Vec<ScenarioRow>> {
    let mut rows = Vec::new();
    for &sc in scenarios {
        for p in policies {
            let finals: Vec<f64> = run_seeds(*p, world, sc, steps, seeds, jobs)?.iter().map(|r| r.final_normalized()).collect();
            let (mean, stderr) = mean_stderr(&finals);
            rows.push(ScenarioRow { scenario: sc, policy: p.name(), n: finals.len(), mean, stderr, finals });
        }
    }
    Ok(rows)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridCell {
    pub num_robots: usize,
    pub num_features: usize,
    pub policy_mean: f64,
    pub baseline_mean: f64,
    pub percent_difference: f64,
}

/// Percent difference of mean final normalized cost, policy vs baseline, for
/// every `(N, F)` pair.
#[allow(clippy::too_many_arguments)]
pub fn scalability_grid(
    policy: &dyn Policy,
    baseline: &dyn Policy,
    world: &WorldConfig,
    robots: &[usize],
    features: &[usize],
    seeds: &[u64],
    steps: usize,
    jobs: usize,
) -> Result<Vec<GridCell>> {
    let mut cells = Vec::with_capacity(robots.len() * features.len());
    for &n in robots {
        for &f in features {
            let w = WorldConfig { num_robots: n, num_features: f, ..world.clone() };
            let mean_of = |p: &dyn Policy| -> Result<f64> {
                let finals: Vec<f64> =
                    run_seeds(p, &w, Scenario::Uniform, steps, seeds, jobs)?.iter().map(|r| r.final_normalized()).collect();
                Ok(mean_stderr(&finals).0)
            };
            let policy_mean = mean_of(policy)?;
            let baseline_mean = mean_of(baseline)?;
            cells.push(GridCell {
                num_robots: n,
                num_features: f,
                policy_mean,
                baseline_mean,
                percent_difference: percent_difference(policy_mean, baseline_mean),
            });
        }
    }
    Ok(cells)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FanRun {
    pub run: u64,
    pub trajectory: Vec<Point<f64>>,
    pub final_cost: f64,
    pub final_normalized: f64,
}

/// Repeated runs from one environment; returns robot `robot`'s path in each.
#[allow(clippy::too_many_arguments)]
pub fn trajectory_fan(
    policy: &dyn Policy,
    world: &WorldConfig,
    scenario: Scenario,
    seed: u64,
    robot: usize,
    runs: usize,
    horizon: usize,
    jobs: usize,
) -> Result<Vec<FanRun>> {
    if robot >= world.num_robots {
        return Err(contract_err!("robot {robot} out of {}", world.num_robots));
    }
    let (field, state) = environment(world, scenario, seed)?;
    let idx: Vec<u64> = (0..runs as u64).collect();
    par_map(jobs, &idx, |&run| {
        let r = rollout_from(policy, &field, state.clone(), scenario, horizon, seed, run)?;
        Ok(FanRun {
            run,
            trajectory: r.trajectory.iter().map(|x| x[robot]).collect(),
            final_cost: *r.costs.last().expect("non-empty"),
            final_normalized: r.final_normalized(),
        })
    })
}

/// `timestep,seed,policy,cost,normalized_cost`.
pub fn write_rollouts_csv<W: Write>(w: W, records: &[RolloutRecord]) -> Result<()> {
    let mut c = csv::Writer::from_writer(w);
    c.write_record(["timestep", "seed", "policy", "cost", "normalized_cost"])?;
    for r in records {
        for (t, (cost, norm)) in r.costs.iter().zip(&r.normalized).enumerate() {
            c.write_record([t.to_string(), r.seed.to_string(), r.policy.clone(), cost.to_string(), norm.to_string()])?;
        }
    }
    c.flush()?;
    Ok(())
}

pub fn write_sigma_csv<W: Write>(w: W, rows: &[SigmaRow]) -> Result<()> {
    let mut c = csv::Writer::from_writer(w);
    c.write_record([
        "sigma_min", "sigma_max", "policy", "n", "min", "q1", "median", "q3", "max", "mean", "whisker_low", "whisker_high",
        "outliers",
    ])?;
    for r in rows {
        let s = &r.stats;
        let outliers = s.outliers.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(";");
        c.write_record([
            r.sigma_range[0].to_string(),
            r.sigma_range[1].to_string(),
            r.policy.clone(),
            s.n.to_string(),
            s.min.to_string(),
            s.q1.to_string(),
            s.median.to_string(),
            s.q3.to_string(),
            s.max.to_string(),
            s.mean.to_string(),
            s.whisker_low.to_string(),
            s.whisker_high.to_string(),
            outliers,
        ])?;
    }
    c.flush()?;
    Ok(())
}

pub fn write_init_csv<W: Write>(w: W, rows: &[ScenarioRow]) -> Result<()> {
    let mut c = csv::Writer::from_writer(w);
    c.write_record(["scenario", "policy", "n", "mean", "stderr"])?;
    for r in rows {
        c.write_record([r.scenario.name().to_string(), r.policy.clone(), r.n.to_string(), r.mean.to_string(), r.stderr.to_string()])?;
    }
    c.flush()?;
    Ok(())
}

pub fn write_grid_csv<W: Write>(w: W, cells: &[GridCell]) -> Result<()> {
    let mut c = csv::Writer::from_writer(w);
    for cell in cells {
        c.serialize(cell)?;
    }
    c.flush()?;
    Ok(())
}

/// `run,timestep,x,y,final_normalized_cost`.
pub fn write_fan_csv<W: Write>(w: W, runs: &[FanRun]) -> Result<()> {
    let mut c = csv::Writer::from_writer(w);
    c.write_record(["run", "timestep", "x", "y", "final_normalized_cost"])?;
    for r in runs {
        for (t, p) in r.trajectory.iter().enumerate() {
            c.write_record([r.run.to_string(), t.to_string(), p[0].to_string(), p[1].to_string(), r.final_normalized.to_string()])?;
        }
    }
    c.flush()?;
    Ok(())
}
