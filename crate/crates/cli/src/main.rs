//! `madp`: data generation, training, rollouts and experiment suites.

mod commands;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

/// Multi-agent diffusion policy for coverage control.
#[derive(Debug, Parser)]
#[command(name = "madp", version)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Roll out the clairvoyant expert and write a behavior-cloning dataset.
    Generate(GenerateArgs),
    /// Train the diffusion policy on a dataset.
    Train(TrainArgs),
    /// Closed-loop rollouts of one policy, one CSV row per seed and step.
    Rollout(RolloutArgs),
    /// Run an experiment suite and write its CSV.
    Eval(EvalArgs),
}

/// Built-in parameter sets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Preset {
    /// 1024 m world, 32 robots, full-size network.
    Full,
    /// 256 m world, four robots and four features, small network.
    Desk,
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    /// JSON file with optional `world` and `generate` sections.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Defaults for everything the config file leaves out.
    #[arg(long, value_enum, default_value = "full")]
    pub preset: Preset,
    /// Output dataset directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Number of examples, overriding the config.
    #[arg(long)]
    pub examples: Option<usize>,
    /// Master seed, overriding the config.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Dataset directory written by `generate`.
    #[arg(long)]
    pub dataset: PathBuf,
    /// JSON model configuration; defaults to the preset.
    #[arg(long)]
    pub model_config: Option<PathBuf>,
    /// JSON training configuration; defaults to the preset.
    #[arg(long)]
    pub train_config: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "full")]
    pub preset: Preset,
    /// Training seed, overriding the training configuration.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Maximum epochs, overriding the training configuration. Patience is
    /// capped at this value.
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Early-stopping patience in epochs, overriding the training configuration.
    #[arg(long)]
    pub patience: Option<usize>,
    /// Output directory for checkpoints and `history.csv`.
    #[arg(long)]
    pub out: PathBuf,
    /// Continue from the last checkpoint in `--out`.
    #[arg(long)]
    pub resume: bool,
}

/// What drives the robots.
#[derive(Debug, Args)]
#[group(required = true, multiple = false)]
pub struct PolicyArgs {
    /// Trained model directory (a `best/` or `last/` checkpoint, or a
    /// training output directory).
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Non-learned policy: clairvoyant, dcvt, random or zero.
    #[arg(long, alias = "expert")]
    pub policy: Option<String>,
}

/// Sampler overrides for learned policies.
#[derive(Debug, Args)]
pub struct SamplerArgs {
    /// Number of DDIM steps.
    #[arg(long)]
    pub sample_steps: Option<usize>,
    /// DDIM stochasticity, 0 is deterministic.
    #[arg(long)]
    pub eta: Option<f64>,
    /// Centralized or decentralized execution.
    #[arg(long, value_enum)]
    pub mode: Option<Mode>,
    /// Clamp on the predicted clean action in normalized units; 0 turns it off.
    #[arg(long)]
    pub clip: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Mode {
    Centralized,
    Decentralized,
}

/// Environment settings shared by rollouts and suites.
#[derive(Debug, Args)]
pub struct WorldArgs {
    /// JSON world configuration; defaults to the preset.
    #[arg(long)]
    pub world_config: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "full")]
    pub preset: Preset,
    /// Horizon in steps.
    #[arg(long, default_value_t = 600)]
    pub steps: usize,
    /// Environment seeds: a list (`1,2,5`), a half-open range (`0..20`) or both.
    #[arg(long, default_value = "0..20")]
    pub seeds: String,
    /// Worker threads; 1 keeps runs byte-reproducible.
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
}

#[derive(Debug, Args)]
pub struct RolloutArgs {
    #[command(flatten)]
    pub policy: PolicyArgs,
    #[command(flatten)]
    pub sampler: SamplerArgs,
    #[command(flatten)]
    pub world: WorldArgs,
    /// Initial positions: uniform, square or line.
    #[arg(long, default_value = "uniform")]
    pub scenario: String,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Suite {
    /// Final cost over feature-size ranges.
    Sigma,
    /// Final cost per initialization scenario.
    Init,
    /// Percent difference against a baseline over robots x features.
    Scale,
    /// Repeated runs from one environment, one robot's path each.
    Fan,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long, value_enum)]
    pub suite: Suite,
    #[command(flatten)]
    pub policy: PolicyArgs,
    #[command(flatten)]
    pub sampler: SamplerArgs,
    #[command(flatten)]
    pub world: WorldArgs,
    /// Extra policies evaluated alongside (sigma, init).
    #[arg(long = "compare", value_name = "POLICY")]
    pub compare: Vec<String>,
    /// Feature-size range `lo,hi` in meters; repeat for several (sigma).
    #[arg(long = "range", value_name = "LO,HI")]
    pub ranges: Vec<String>,
    /// Baseline policy (scale).
    #[arg(long, default_value = "dcvt")]
    pub baseline: String,
    /// Robot counts, comma separated (scale).
    #[arg(long, default_value = "8,16,32,64")]
    pub robots: String,
    /// Feature counts, comma separated (scale).
    #[arg(long, default_value = "16,32,64")]
    pub features: String,
    /// Scenarios, comma separated (init); defaults to all three. The fan
    /// suite uses the first one.
    #[arg(long, default_value = "uniform,square,line")]
    pub scenarios: String,
    /// Repetitions from the same environment (fan).
    #[arg(long, default_value_t = 10)]
    pub runs: usize,
    /// Robot whose path is recorded (fan).
    #[arg(long, default_value_t = 0)]
    pub robot: usize,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(if commands::is_usage(&e) { 1 } else { 2 })
        }
    }
}
