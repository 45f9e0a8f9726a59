//! The epoch loop: seeded mini-batches, Adam, validation accuracy, plateau
//! scheduling, early stopping, and best-model tracking.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Graph;
use crate::data::{batches, sequential_batches, PatchSource};
use crate::error::{Error, Result};
use crate::model::{save_checkpoint, Model};
use crate::optim::{early_stop_check, plateau_scheduler_step, AdamState};
use crate::tensor::Tensor;

/// Every knob of the training protocol.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub lr_init: f64,
    pub lr_min: f64,
    /// Epochs without a new best before the rate is cut.
    pub plateau_patience: usize,
    pub lr_factor: f64,
    /// Epochs without a new best before training stops.
    pub early_stop_patience: usize,
    pub max_epochs: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 32,
            lr_init: 1e-3,
            lr_min: 1e-10,
            plateau_patience: 10,
            lr_factor: 0.5,
            early_stop_patience: 50,
            max_epochs: 1000,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        // Train-mode batch normalization needs two samples per batch.
        if self.batch_size < 2 {
            return Err(Error::config("batch_size", format!("must be at least 2, got {}", self.batch_size)));
        }
        if !(self.lr_init > 0.0 && self.lr_init.is_finite()) {
            return Err(Error::config("lr_init", format!("must be positive and finite, got {}", self.lr_init)));
        }
        if !(self.lr_min > 0.0) {
            return Err(Error::config("lr_min", format!("must be positive, got {}", self.lr_min)));
        }
        if self.lr_min > self.lr_init {
            return Err(Error::config("lr_min", format!("must not exceed lr_init ({} > {})", self.lr_min, self.lr_init)));
        }
        if !(self.lr_factor > 0.0 && self.lr_factor < 1.0) {
            return Err(Error::config("lr_factor", format!("must lie in (0, 1), got {}", self.lr_factor)));
        }
        for (field, v) in [("plateau_patience", self.plateau_patience), ("early_stop_patience", self.early_stop_patience), ("max_epochs", self.max_epochs)] {
            if v == 0 {
                return Err(Error::config(field, "must be at least 1"));
            }
        }
        Ok(())
    }

    /// Shuffle seed of a (1-based) epoch.
    pub fn epoch_seed(&self, epoch: usize) -> u64 {
        self.seed ^ epoch as u64
    }
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    /// Mean cross-entropy over the epoch's training samples.
    pub train_loss: f64,
    pub val_accuracy: f64,
    /// Rate used during this epoch.
    pub lr: f64,
    pub seconds: f64,
}

/// Hooks called by [`train`] after each epoch and on each new best model.
pub trait TrainObserver {
    fn on_epoch(&mut self, _record: &EpochRecord) -> Result<()> {
        Ok(())
    }

    fn on_best(&mut self, _model: &Model, _record: &EpochRecord) -> Result<()> {
        Ok(())
    }
}

/// Observer that ignores everything.
pub struct Silent;

impl TrainObserver for Silent {}

/// Appends the log as JSON lines and rewrites a checkpoint on each new best.
pub struct RunArtifacts {
    log: std::fs::File,
    log_path: PathBuf,
    checkpoint: PathBuf,
}

impl RunArtifacts {
    pub fn create(log_path: impl Into<PathBuf>, checkpoint: impl Into<PathBuf>) -> Result<Self> {
        let log_path = log_path.into();
        let log = std::fs::File::create(&log_path).map_err(|e| Error::io(&log_path, e))?;
        Ok(RunArtifacts {
            log,
            log_path,
            checkpoint: checkpoint.into(),
        })
    }

    pub fn checkpoint_path(&self) -> &Path {
        &self.checkpoint
    }
}

impl TrainObserver for RunArtifacts {
    fn on_epoch(&mut self, record: &EpochRecord) -> Result<()> {
        let line = serde_json::to_string(record)?;
        writeln!(self.log, "{line}").map_err(|e| Error::io(&self.log_path, e))
    }

    fn on_best(&mut self, model: &Model, _record: &EpochRecord) -> Result<()> {
        save_checkpoint(model, &self.checkpoint)
    }
}

/// Result of a training run. `best` is the model from the epoch with the
/// highest validation accuracy, not the last one.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub best: Model,
    pub best_epoch: usize,
    pub best_val_accuracy: f64,
    pub log: Vec<EpochRecord>,
    pub stopped_early: bool,
}

/// Larger batches only cost memory at inference time.
const SCORING_BATCH: usize = 128;

/// Positive-class probability of every patch in `source`, in order.
pub fn score_source(model: &Model, source: &dyn PatchSource) -> Result<Vec<f32>> {
    let mut scores = Vec::with_capacity(source.len());
    for batch in sequential_batches(source, SCORING_BATCH) {
        let probs = model.predict_proba(&batch?.images)?;
        scores.extend(probs.data().chunks(2).map(|row| row[1]));
    }
    Ok(scores)
}

/// Fraction of patches whose positive probability is on the right side of 0.5.
pub fn accuracy(model: &Model, source: &dyn PatchSource) -> Result<f64> {
    if source.is_empty() {
        return Err(Error::Data("accuracy of an empty set".into()));
    }
    let scores = score_source(model, source)?;
    let correct = scores.iter().enumerate().filter(|&(i, &s)| u8::from(s >= 0.5) == source.label(i)).count();
    Ok(correct as f64 / source.len() as f64)
}

/// One optimizer step on a mini-batch; returns the batch loss.
fn train_step(model: &mut Model, adam: &mut AdamState, images: &Tensor, labels: &[usize], lr: f64, rng: &mut ChaCha8Rng) -> Result<f64> {
    let mut g = Graph::new();
    let x = g.constant(images.clone());
    let out = model.forward_train(&mut g, x, rng)?;
    let (loss, _) = g.softmax_cross_entropy(out.logits, labels)?;
    let value = f64::from(g.value(loss).item()?);
    if !value.is_finite() {
        return Ok(value);
    }
    let mut grads = g.backward(loss)?;
    let params = &mut model.registry_mut().params;
    let grads: Vec<Tensor> = out
        .params
        .iter()
        .enumerate()
        .map(|(i, &id)| grads.take(id).unwrap_or_else(|| Tensor::zeros(params.get(i).shape())))
        .collect();
    adam.step(params.tensors_mut(), &grads, lr)?;
    Ok(value)
}

/// Trains `model` under `cfg`, validating on `val` after every epoch.
pub fn train(mut model: Model, train_set: &dyn PatchSource, val_set: &dyn PatchSource, cfg: &TrainConfig, observer: &mut dyn TrainObserver) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::Data(format!("empty dataset (train {}, val {})", train_set.len(), val_set.len())));
    }
    if cfg.batch_size > train_set.len() {
        return Err(Error::config("batch_size", format!("{} exceeds the {} training samples", cfg.batch_size, train_set.len())));
    }
    let mut adam = AdamState::new(model.registry().params.tensors());
    let mut lr = cfg.lr_init;
    let mut history = Vec::new();
    let mut log = Vec::new();
    let mut best: Option<(Model, usize, f64)> = None;
    let mut stopped_early = false;

    for epoch in 1..=cfg.max_epochs {
        let started = Instant::now();
        let seed = cfg.epoch_seed(epoch);
        let mut dropout_rng = ChaCha8Rng::seed_from_u64(seed);
        dropout_rng.set_stream(1);
        let (mut loss_sum, mut seen) = (0.0, 0usize);
        for (b, batch) in batches(train_set, cfg.batch_size, seed)?.enumerate() {
            let batch = batch?;
            if batch.labels.len() < 2 {
                log::debug!("epoch {epoch}: skipping a trailing batch of one sample");
                continue;
            }
            let loss = train_step(&mut model, &mut adam, &batch.images, &batch.labels, lr, &mut dropout_rng)?;
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss { epoch, batch: b, loss });
            }
            loss_sum += loss * batch.labels.len() as f64;
            seen += batch.labels.len();
        }
        let val_accuracy = accuracy(&model, val_set)?;
        let record = EpochRecord {
            epoch,
            train_loss: loss_sum / seen.max(1) as f64,
            val_accuracy,
            lr,
            seconds: started.elapsed().as_secs_f64(),
        };
        log::info!("epoch {epoch}: loss {:.5} val acc {:.4} lr {lr:e}", record.train_loss, val_accuracy);
        observer.on_epoch(&record)?;
        if best.as_ref().is_none_or(|(_, _, acc)| val_accuracy > *acc) {
            observer.on_best(&model, &record)?;
            best = Some((model.clone(), epoch, val_accuracy));
        }
        history.push(val_accuracy);
        log.push(record);
        if early_stop_check(&history, cfg) {
            stopped_early = true;
            break;
        }
        lr = plateau_scheduler_step(&history, lr, cfg);
    }
    let (best, best_epoch, best_val_accuracy) = best.expect("max_epochs >= 1");
    Ok(TrainOutcome {
        best,
        best_epoch,
        best_val_accuracy,
        log,
        stopped_early,
    })
}
