use std::fs::{self, File};
use std::io::BufWriter;
use std::path::Path;
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use madp::diffusion::{ExecutionMode, MadpModel, ModelConfig};
use madp::evalharness::{
    baseline_policy, init_scenarios, run_seeds, scalability_grid, sigma_sweep, trajectory_fan, write_fan_csv,
    write_grid_csv, write_init_csv, write_rollouts_csv, write_sigma_csv, MadpPolicy, Policy, Scenario,
};
use madp::train::{best_checkpoint, generate_dataset, Dataset, GenerateConfig, TrainConfig, Trainer};
use madp::world::WorldConfig;
use serde::de::DeserializeOwned;
use serde::Deserialize;
use serde_json::json;

use crate::output::{resolve, write_json, Staged};
use crate::{Cli, Command, EvalArgs, GenerateArgs, Mode, PolicyArgs, Preset, RolloutArgs, SamplerArgs, Suite, TrainArgs, WorldArgs};

/// Bad flag values found after parsing; reported with the usage exit code.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct UsageError(pub String);

fn usage<T>(msg: impl Into<String>) -> Result<T> {
    Err(UsageError(msg.into()).into())
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Generate(a) => generate(a),
        Command::Train(a) => train(a),
        Command::Rollout(a) => rollout(a),
        Command::Eval(a) => eval(a),
    }
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn world_preset(p: Preset) -> WorldConfig {
    match p {
        Preset::Full => WorldConfig::default(),
        Preset::Desk => WorldConfig::desk(),
    }
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct GenerateFile {
    world: Option<WorldConfig>,
    generate: Option<GenerateConfig>,
}

fn generate(a: GenerateArgs) -> Result<()> {
    let file: GenerateFile = match &a.config {
        Some(p) => read_json(p)?,
        None => GenerateFile::default(),
    };
    let world = file.world.unwrap_or_else(|| world_preset(a.preset));
    let mut gen = file.generate.unwrap_or_else(|| match a.preset {
        Preset::Full => GenerateConfig::default(),
        Preset::Desk => GenerateConfig::desk(),
    });
    if let Some(n) = a.examples {
        gen.examples = n;
    }
    if let Some(s) = a.seed {
        gen.seed = s;
    }
    world.validate()?;
    gen.validate()?;

    let ds = generate_dataset(&world, &gen)?;
    let staged = Staged::new(&resolve(&a.out))?;
    ds.save(staged.path())?;
    let out = staged.commit()?;
    let [train, val, test] = ds.splits.sizes();
    eprintln!("wrote {} examples ({train}/{val}/{test} train/val/test) to {}", ds.len(), out.display());
    Ok(())
}

fn train(a: TrainArgs) -> Result<()> {
    let ds = Dataset::load(&a.dataset).with_context(|| format!("loading dataset {}", a.dataset.display()))?;
    let mut cfg: TrainConfig = match &a.train_config {
        Some(p) => read_json(p)?,
        None => match a.preset {
            Preset::Full => TrainConfig::default(),
            Preset::Desk => TrainConfig::desk(),
        },
    };
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(e) = a.epochs {
        cfg.max_epochs = e;
        cfg.patience = cfg.patience.min(e);
    }
    if let Some(p) = a.patience {
        cfg.patience = p;
    }
    cfg.validate()?;
    let out = resolve(&a.out);

    // checkpoints are written in place after every epoch so a run can resume
    let trainer = if a.resume {
        Trainer::resume(&out, cfg.clone()).with_context(|| format!("resuming from {}", out.display()))?
    } else {
        let model_cfg = match &a.model_config {
            Some(p) => read_json(p)?,
            None => {
                let base = match a.preset {
                    Preset::Full => ModelConfig::default(),
                    Preset::Desk => ModelConfig::desk(),
                };
                ModelConfig { side_length: ds.world.side_length, action_scale: ds.world.u_max, ..base }
            }
        };
        check_world(&model_cfg, &ds.world)?;
        if out.join("history.csv").exists() {
            bail!("{} already holds a training run; pass --resume or choose another --out", out.display());
        }
        Trainer::new(model_cfg, cfg.clone())?
    };
    let first = trainer.next_epoch();
    let outcome = trainer.run(&ds, Some(&out), |r| {
        eprintln!("epoch {:5}  train {:.6}  val {:.6}", r.epoch, r.train_loss, r.val_loss)
    })?;
    write_json(
        &out.join("manifest.json"),
        &json!({
            "command": "train",
            "dataset": a.dataset,
            "train_config": cfg,
            "model_config": outcome.model.config(),
            "first_epoch": first,
            "epochs_completed": outcome.history.len(),
            "best_epoch": outcome.best_epoch,
            "best_val_loss": outcome.best_val_loss,
            "stop": format!("{:?}", outcome.stop),
        }),
    )?;
    eprintln!("best epoch {} (val {:.6}); stopped: {:?}", outcome.best_epoch, outcome.best_val_loss, outcome.stop);
    Ok(())
}

fn check_world(model: &ModelConfig, world: &WorldConfig) -> Result<()> {
    if model.side_length != world.side_length {
        bail!("model expects a {} m world but the world is {} m", model.side_length, world.side_length);
    }
    Ok(())
}

/// Accepts `a,b,c`, `lo..hi` (half-open) or a mix such as `0..3,10`.
pub fn parse_seeds(s: &str) -> Result<Vec<u64>> {
    let mut seeds = Vec::new();
    for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        if let Some((lo, hi)) = part.split_once("..") {
            let (lo, hi): (u64, u64) = match (lo.parse(), hi.parse()) {
                (Ok(l), Ok(h)) if l < h => (l, h),
                _ => return usage(format!("bad seed range '{part}'")),
            };
            seeds.extend(lo..hi);
        } else {
            match part.parse() {
                Ok(v) => seeds.push(v),
                Err(_) => return usage(format!("bad seed '{part}'")),
            }
        }
    }
    if seeds.is_empty() {
        return usage("no seeds given");
    }
    Ok(seeds)
}

fn parse_list(s: &str, what: &str) -> Result<Vec<usize>> {
    let v: Result<Vec<usize>, _> = s.split(',').map(|x| x.trim().parse::<usize>()).collect();
    match v {
        Ok(v) if !v.is_empty() && v.iter().all(|&x| x > 0) => Ok(v),
        _ => usage(format!("bad {what} list '{s}'")),
    }
}

fn parse_range(s: &str) -> Result<[f64; 2]> {
    let parts: Vec<&str> = s.split(',').map(str::trim).collect();
    match parts.as_slice() {
        [lo, hi] => match (lo.parse::<f64>(), hi.parse::<f64>()) {
            (Ok(l), Ok(h)) if l > 0.0 && l <= h => Ok([l, h]),
            _ => usage(format!("bad range '{s}', expected LO,HI with 0 < LO <= HI")),
        },
        _ => usage(format!("bad range '{s}', expected LO,HI")),
    }
}

fn parse_scenario(s: &str) -> Result<Scenario> {
    Scenario::parse(s).or_else(|_| usage(format!("unknown scenario '{s}' (expected uniform, square or line)")))
}

fn load_world(a: &WorldArgs) -> Result<WorldConfig> {
    let w = match &a.world_config {
        Some(p) => read_json(p)?,
        None => world_preset(a.preset),
    };
    w.validate()?;
    if a.jobs == 0 {
        return usage("--jobs must be at least 1");
    }
    Ok(w)
}

fn load_model(path: &Path) -> Result<MadpModel<f64>> {
    let dir = if path.join("best").is_dir() { best_checkpoint(path) } else { path.to_path_buf() };
    let (model, _) = MadpModel::<f64>::load(&dir).with_context(|| format!("loading checkpoint {}", dir.display()))?;
    Ok(model)
}

fn build_policy(p: &PolicyArgs, s: &SamplerArgs, world: &WorldConfig) -> Result<Box<dyn Policy>> {
    if let Some(ck) = &p.checkpoint {
        let model = load_model(ck)?;
        check_world(model.config(), world)?;
        let mut policy = MadpPolicy::new(Arc::new(model));
        if let Some(k) = s.sample_steps {
            policy.settings.steps = k;
        }
        if let Some(eta) = s.eta {
            policy.settings.eta = eta;
        }
        if let Some(c) = s.clip {
            if c.is_nan() || c < 0.0 {
                return usage(format!("--clip must be non-negative, got {c}"));
            }
            policy.settings.clip = (c > 0.0).then_some(c);
        }
        if let Some(m) = s.mode {
            policy.settings.mode = match m {
                Mode::Centralized => ExecutionMode::Centralized,
                Mode::Decentralized => ExecutionMode::Decentralized,
            };
        }
        Ok(Box::new(policy))
    } else {
        named_policy(p.policy.as_deref().expect("clap requires one policy source"))
    }
}

fn named_policy(name: &str) -> Result<Box<dyn Policy>> {
    let name = if name == "expert" { "clairvoyant" } else { name };
    baseline_policy(name).or_else(|_| usage(format!("unknown policy '{name}' (expected clairvoyant, dcvt, random or zero)")))
}

fn rollout(a: RolloutArgs) -> Result<()> {
    let world = load_world(&a.world)?;
    let scenario = parse_scenario(&a.scenario)?;
    let seeds = parse_seeds(&a.world.seeds)?;
    let policy = build_policy(&a.policy, &a.sampler, &world)?;
    let records = run_seeds(policy.as_ref(), &world, scenario, a.world.steps, &seeds, a.world.jobs)?;

    let staged = Staged::new(&resolve(&a.out))?;
    write_rollouts_csv(BufWriter::new(File::create(staged.path().join("rollouts.csv"))?), &records)?;
    let finals: Vec<f64> = records.iter().map(|r| r.final_normalized()).collect();
    write_json(
        &staged.path().join("manifest.json"),
        &json!({
            "command": "rollout",
            "policy": policy.name(),
            "checkpoint": a.policy.checkpoint,
            "scenario": scenario,
            "steps": a.world.steps,
            "seeds": seeds,
            "world": world,
            "final_normalized_cost": finals,
        }),
    )?;
    let out = staged.commit()?;
    let mean = finals.iter().sum::<f64>() / finals.len() as f64;
    eprintln!("{}: mean final normalized cost {mean:.4} over {} seeds; wrote {}", policy.name(), seeds.len(), out.display());
    Ok(())
}

fn eval(a: EvalArgs) -> Result<()> {
    let world = load_world(&a.world)?;
    let seeds = parse_seeds(&a.world.seeds)?;
    let (steps, jobs) = (a.world.steps, a.world.jobs);
    let main = build_policy(&a.policy, &a.sampler, &world)?;
    let others: Vec<Box<dyn Policy>> = a.compare.iter().map(|n| named_policy(n)).collect::<Result<_>>()?;
    let mut policies: Vec<&dyn Policy> = vec![main.as_ref()];
    policies.extend(others.iter().map(|p| p.as_ref()));
    let scenarios: Vec<Scenario> = a.scenarios.split(',').map(|s| parse_scenario(s.trim())).collect::<Result<_>>()?;

    let staged = Staged::new(&resolve(&a.out))?;
    let mut manifest = json!({
        "command": "eval",
        "policies": policies.iter().map(|p| p.name()).collect::<Vec<_>>(),
        "checkpoint": a.policy.checkpoint,
        "steps": steps,
        "seeds": seeds,
        "world": world,
    });
    let file = |name: &str| -> Result<BufWriter<File>> { Ok(BufWriter::new(File::create(staged.path().join(name))?)) };
    match a.suite {
        Suite::Sigma => {
            let ranges: Vec<[f64; 2]> = if a.ranges.is_empty() {
                vec![world.sigma_range]
            } else {
                a.ranges.iter().map(|r| parse_range(r)).collect::<Result<_>>()?
            };
            let rows = sigma_sweep(&policies, &world, &ranges, &seeds, steps, jobs)?;
            write_sigma_csv(file("sigma.csv")?, &rows)?;
            manifest["suite"] = json!("sigma");
            manifest["ranges"] = json!(ranges);
        }
        Suite::Init => {
            let rows = init_scenarios(&policies, &world, &scenarios, &seeds, steps, jobs)?;
            write_init_csv(file("init.csv")?, &rows)?;
            manifest["suite"] = json!("init");
            manifest["scenarios"] = json!(scenarios);
        }
        Suite::Scale => {
            let baseline = named_policy(&a.baseline)?;
            let robots = parse_list(&a.robots, "robot")?;
            let features = parse_list(&a.features, "feature")?;
            let cells = scalability_grid(main.as_ref(), baseline.as_ref(), &world, &robots, &features, &seeds, steps, jobs)?;
            write_grid_csv(file("scale.csv")?, &cells)?;
            manifest["suite"] = json!("scale");
            manifest["baseline"] = json!(baseline.name());
            manifest["robots"] = json!(robots);
            manifest["features"] = json!(features);
        }
        Suite::Fan => {
            let scenario = scenarios[0];
            let seed = seeds[0];
            let runs = trajectory_fan(main.as_ref(), &world, scenario, seed, a.robot, a.runs, steps, jobs)?;
            write_fan_csv(file("fan.csv")?, &runs)?;
            manifest["suite"] = json!("fan");
            manifest["scenario"] = json!(scenario);
            manifest["seed"] = json!(seed);
            manifest["robot"] = json!(a.robot);
            manifest["runs"] = json!(a.runs);
        }
    }
    write_json(&staged.path().join("manifest.json"), &manifest)?;
    let out = staged.commit()?;
    eprintln!("wrote {}", out.display());
    Ok(())
}

/// Whether an error should map to the usage exit code.
pub fn is_usage(e: &anyhow::Error) -> bool {
    e.downcast_ref::<UsageError>().is_some()
}
