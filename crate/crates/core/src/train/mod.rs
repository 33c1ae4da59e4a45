//! Imitation learning: expert datasets and the noise-prediction training loop.

mod dataset;

pub use dataset::{
    generate_dataset, regenerate_example, rollout_start, Dataset, Example, ExampleMeta, GenerateConfig, Splits,
    DATASET_MANIFEST,
};

use std::fs;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::diffusion::{MadpModel, ModelConfig};
use crate::error::{Error, Result};
use crate::ndtensor::{ParamStore, Tape, Tensor};
use crate::rng::{keyed_rng, Stream};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Epochs without a `min_delta` improvement before stopping.
    pub patience: usize,
    pub min_delta: f64,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Wall-clock limit; training stops after the epoch that crosses it.
    pub time_budget_secs: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 8.5e-5,
            weight_decay: 2.1e-12,
            batch_size: 196,
            max_epochs: 1000,
            patience: 500,
            min_delta: 1e-4,
            seed: 0,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            time_budget_secs: None,
        }
    }
}

impl TrainConfig {
    /// Settings for the small 4-robot world.
    pub fn desk() -> Self {
        Self {
            learning_rate: 1e-3,
            weight_decay: 1e-6,
            batch_size: 32,
            max_epochs: 300,
            patience: 40,
            time_budget_secs: Some(1500.0),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.weight_decay >= 0.0 && self.min_delta >= 0.0) {
            return Err(Error::Config("learning_rate, weight_decay and min_delta must be non-negative".into()));
        }
        if self.batch_size == 0 || self.max_epochs == 0 || self.patience == 0 || self.patience > self.max_epochs {
            return Err(Error::Config("need batch_size, max_epochs > 0 and 0 < patience <= max_epochs".into()));
        }
        if !((0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2) && self.epsilon > 0.0) {
            return Err(Error::Config("Adam betas must lie in [0, 1) and epsilon be positive".into()));
        }
        Ok(())
    }

    pub fn from_json_file(path: &Path) -> Result<Self> {
        let c: Self = serde_json::from_str(&fs::read_to_string(path)?)?;
        c.validate()?;
        Ok(c)
    }
}

/// Adam with decoupled weight decay.
#[derive(Debug, Clone)]
pub struct AdamW {
    m: ParamStore<f64>,
    v: ParamStore<f64>,
    t: u64,
}

impl AdamW {
    pub fn new(params: &ParamStore<f64>) -> Self {
        let zeros = || {
            let mut s = ParamStore::new();
            for id in params.ids() {
                s.add(params.name(id), Tensor::zeros(params.get(id).shape())).expect("unique names");
            }
            s
        };
        Self { m: zeros(), v: zeros(), t: 0 }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn step(&mut self, params: &mut ParamStore<f64>, grads: &[Tensor<f64>], cfg: &TrainConfig) {
        self.t += 1;
        let (b1, b2) = (cfg.beta1, cfg.beta2);
        let c1 = 1.0 - b1.powi(self.t as i32);
        let c2 = 1.0 - b2.powi(self.t as i32);
        for (id, g) in params.ids().collect::<Vec<_>>().into_iter().zip(grads) {
            let m = self.m.get_mut(id).data_mut();
            let v = self.v.get_mut(id).data_mut();
            let p = params.get_mut(id).data_mut();
            for (((p, m), v), &g) in p.iter_mut().zip(m.iter_mut()).zip(v.iter_mut()).zip(g.data()) {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                let update = (*m / c1) / ((*v / c2).sqrt() + cfg.epsilon);
                *p -= cfg.learning_rate * (update + cfg.weight_decay * *p);
            }
        }
    }

    fn save(&self, dir: &Path) -> Result<()> {
        self.m.save(&dir.join("m"), serde_json::json!({ "t": self.t }))?;
        self.v.save(&dir.join("v"), serde_json::Value::Null)
    }

    fn load(dir: &Path, params: &ParamStore<f64>) -> Result<Self> {
        let mut opt = Self::new(params);
        let (m, meta) = ParamStore::load(&dir.join("m"))?;
        let (v, _) = ParamStore::load(&dir.join("v"))?;
        opt.m.load_values_from(&m)?;
        opt.v.load_values_from(&v)?;
        opt.t = meta["t"].as_u64().ok_or_else(|| Error::Format("optimizer state lacks step count".into()))?;
        Ok(opt)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    MaxEpochs,
    Patience,
    TimeBudget,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters of the epoch with the lowest validation loss.
    pub model: MadpModel<f64>,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub stop: StopReason,
}

/// Progress that survives a restart.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct Progress {
    next_epoch: usize,
    best_epoch: usize,
    best_val_loss: f64,
    /// Best loss that counted as an improvement for early stopping.
    patience_ref: f64,
    since_improved: usize,
    history: Vec<EpochRecord>,
}

const BEST_DIR: &str = "best";
const LAST_DIR: &str = "last";
const OPT_DIR: &str = "optimizer";
pub const HISTORY_CSV: &str = "history.csv";

/// Mean loss over `idx` with noise from a stream fixed by `seed`, so repeated
/// evaluations of the same parameters agree exactly.
pub fn evaluation_loss(model: &MadpModel<f64>, ds: &Dataset, idx: &[usize], batch_size: usize, seed: u64) -> Result<f64> {
    if idx.is_empty() {
        return Ok(f64::NAN);
    }
    let radius = model.config().transformer.attention_radius;
    let mut total = 0.0;
    for (b, chunk) in idx.chunks(batch_size.max(1)).enumerate() {
        let batch = ds.batch(chunk, radius)?;
        let mut tape = Tape::new();
        let p = model.store().bind(&mut tape, false);
        let mut rng = keyed_rng(seed, Stream::Validation, &[b as u64]);
        let l = model.loss(&mut tape, &p, &batch, &mut rng)?;
        total += tape.value(l).data()[0] * chunk.len() as f64;
    }
    Ok(total / idx.len() as f64)
}

pub fn write_history(path: &Path, history: &[EpochRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in history {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub struct Trainer {
    model: MadpModel<f64>,
    best: ParamStore<f64>,
    opt: AdamW,
    cfg: TrainConfig,
    progress: Progress,
}

impl Trainer {
    pub fn new(model_cfg: ModelConfig, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let model = MadpModel::new(model_cfg, cfg.seed)?;
        Ok(Self::from_model(model, cfg))
    }

    pub fn from_model(model: MadpModel<f64>, cfg: TrainConfig) -> Self {
        let progress = Progress {
            next_epoch: 0,
            best_epoch: 0,
            best_val_loss: f64::INFINITY,
            patience_ref: f64::INFINITY,
            since_improved: 0,
            history: Vec::new(),
        };
        Self { best: model.store().clone(), opt: AdamW::new(model.store()), model, cfg, progress }
    }

    /// Continues a run previously written to `out`.
    pub fn resume(out: &Path, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let (model, extra) = MadpModel::<f64>::load(&out.join(LAST_DIR))?;
        let progress: Progress = serde_json::from_value(extra)?;
        let (best, _) = MadpModel::<f64>::load(&out.join(BEST_DIR))?;
        let opt = AdamW::load(&out.join(LAST_DIR).join(OPT_DIR), model.store())?;
        Ok(Self { best: best.store().clone(), opt, model, cfg, progress })
    }

    pub fn model(&self) -> &MadpModel<f64> {
        &self.model
    }

    pub fn next_epoch(&self) -> usize {
        self.progress.next_epoch
    }

    /// One pass over the training split; returns the mean batch loss.
    fn epoch(&mut self, ds: &Dataset, epoch: usize) -> Result<f64> {
        let mut idx = ds.splits.train.clone();
        idx.shuffle(&mut keyed_rng(self.cfg.seed, Stream::Shuffle, &[epoch as u64]));
        let radius = self.model.config().transformer.attention_radius;
        let mut total = 0.0;
        for (b, chunk) in idx.chunks(self.cfg.batch_size).enumerate() {
            let batch = ds.batch(chunk, radius)?;
            let mut tape = Tape::new();
            let p = self.model.store().bind(&mut tape, true);
            let mut rng = keyed_rng(self.cfg.seed, Stream::LossNoise, &[epoch as u64, b as u64]);
            let loss = self.model.loss(&mut tape, &p, &batch, &mut rng)?;
            let lv = tape.value(loss).data()[0];
            if !lv.is_finite() {
                return Err(Error::NonFinite(format!("training loss {lv} at epoch {epoch}, batch {b}")));
            }
            tape.backward(loss)?;
            let grads = p.grads(&tape);
            if let Some(g) = grads.iter().position(|g| !g.all_finite()) {
                let name = self.model.store().name(crate::ndtensor::ParamId(g)).to_string();
                return Err(Error::NonFinite(format!("gradient of {name} at epoch {epoch}, batch {b}")));
            }
            drop(tape);
            self.opt.step(self.model.store_mut(), &grads, &self.cfg);
            total += lv * chunk.len() as f64;
        }
        Ok(total / idx.len().max(1) as f64)
    }

    /// Trains until early stopping, `max_epochs` or the time budget. When
    /// `out` is given, the best and latest checkpoints and the loss history
    /// are written there after every epoch.
    pub fn run(mut self, ds: &Dataset, out: Option<&Path>, mut on_epoch: impl FnMut(&EpochRecord)) -> Result<TrainOutcome> {
        if ds.splits.train.is_empty() {
            return Err(Error::Config("dataset has no training examples".into()));
        }
        let start = Instant::now();
        let mut stop = StopReason::MaxEpochs;
        while self.progress.next_epoch < self.cfg.max_epochs {
            let epoch = self.progress.next_epoch;
            let train_loss = self.epoch(ds, epoch)?;
            let val_loss = if ds.splits.val.is_empty() {
                train_loss
            } else {
                evaluation_loss(&self.model, ds, &ds.splits.val, self.cfg.batch_size, self.cfg.seed)?
            };
            if !val_loss.is_finite() {
                return Err(Error::NonFinite(format!("validation loss {val_loss} at epoch {epoch}")));
            }
            let rec = EpochRecord { epoch, train_loss, val_loss };
            self.progress.history.push(rec);
            on_epoch(&rec);
            if val_loss < self.progress.best_val_loss {
                self.progress.best_val_loss = val_loss;
                self.progress.best_epoch = epoch;
                self.best = self.model.store().clone();
            }
            if val_loss < self.progress.patience_ref - self.cfg.min_delta {
                self.progress.patience_ref = val_loss;
                self.progress.since_improved = 0;
            } else {
                self.progress.since_improved += 1;
            }
            self.progress.next_epoch += 1;
            if let Some(dir) = out {
                self.checkpoint(dir)?;
            }
            if self.progress.since_improved >= self.cfg.patience {
                stop = StopReason::Patience;
                break;
            }
            if self.cfg.time_budget_secs.is_some_and(|b| start.elapsed().as_secs_f64() >= b) {
                stop = StopReason::TimeBudget;
                break;
            }
        }
        let mut model = self.model;
        *model.store_mut() = self.best;
        Ok(TrainOutcome {
            model,
            history: self.progress.history,
            best_epoch: self.progress.best_epoch,
            best_val_loss: self.progress.best_val_loss,
            stop,
        })
    }

    fn checkpoint(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let mut best = self.model.clone();
        *best.store_mut() = self.best.clone();
        let summary = serde_json::json!({
            "best_epoch": self.progress.best_epoch,
            "best_val_loss": self.progress.best_val_loss,
            "train_config": self.cfg,
        });
        best.save(&dir.join(BEST_DIR), summary)?;
        self.model.save(&dir.join(LAST_DIR), serde_json::to_value(&self.progress)?)?;
        self.opt.save(&dir.join(LAST_DIR).join(OPT_DIR))?;
        write_history(&dir.join(HISTORY_CSV), &self.progress.history)
    }
}

/// Path of the best-validation checkpoint inside a training output directory.
pub fn best_checkpoint(out: &Path) -> std::path::PathBuf {
    out.join(BEST_DIR)
}
