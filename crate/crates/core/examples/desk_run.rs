//! End-to-end run on the small world: generate expert data, train, and
//! compare the learned policy against random and expert baselines.
//!
//! `cargo run --release -p madp-core --example desk_run -- [out_dir]`

use std::sync::Arc;
use std::time::Instant;

use madp::diffusion::ModelConfig;
use madp::evalharness::{run_seeds, ClairvoyantPolicy, DcvtPolicy, MadpPolicy, Policy, RandomPolicy, Scenario};
use madp::train::{generate_dataset, GenerateConfig, TrainConfig, Trainer};
use madp::world::WorldConfig;

fn main() -> madp::Result<()> {
    let out = std::env::args().nth(1).map(std::path::PathBuf::from);
    let world = WorldConfig::desk();
    let t0 = Instant::now();
    let ds = generate_dataset(&world, &GenerateConfig::desk())?;
    println!("dataset: {} examples in {:.1}s", ds.len(), t0.elapsed().as_secs_f64());

    let cfg = TrainConfig::desk();
    let trainer = Trainer::new(ModelConfig::desk(), cfg)?;
    let t1 = Instant::now();
    let outcome = trainer.run(&ds, out.as_deref(), |r| {
        println!(
            "epoch {:4}  train {:.4}  val {:.4}  ({:.0}s)",
            r.epoch,
            r.train_loss,
            r.val_loss,
            t1.elapsed().as_secs_f64()
        )
    })?;
    println!("best epoch {} val {:.4} stop {:?}", outcome.best_epoch, outcome.best_val_loss, outcome.stop);

    let seeds: Vec<u64> = (1000..1020).collect();
    let madp = MadpPolicy::new(Arc::new(outcome.model));
    let policies: [&dyn Policy; 4] = [&madp, &RandomPolicy, &ClairvoyantPolicy, &DcvtPolicy];
    for p in policies {
        let t = Instant::now();
        let recs = run_seeds(p, &world, Scenario::Uniform, 150, &seeds, 1)?;
        let mean = recs.iter().map(|r| r.final_normalized()).sum::<f64>() / recs.len() as f64;
        println!("{:12} mean final normalized cost {:.4}  ({:.1}s)", p.name(), mean, t.elapsed().as_secs_f64());
    }
    Ok(())
}
