//! Two-phase training: early-stopped Adam on a held-out tail, then a fixed
//! number of epochs on all data starting from the best weights.

use std::io::Write;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{collate, evaluate_rmse};
use crate::keyframes::{MinMaxScaler, TrainingInstance};
use crate::model::StarModel;
use crate::tensor::{Adam, AdamState, Tape};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_learning_rate")]
    pub learning_rate: f64,
    pub max_epochs: usize,
    #[serde(default = "default_patience")]
    pub early_stop_patience: usize,
    #[serde(default = "default_retrain_epochs")]
    pub retrain_epochs: usize,
    /// Length of the validation tail; overrides `validation_fraction`.
    #[serde(default)]
    pub validation_intervals: Option<usize>,
    #[serde(default = "default_validation_fraction")]
    pub validation_fraction: f64,
    #[serde(default)]
    pub seed: u64,
}

fn default_batch_size() -> usize {
    16
}
fn default_learning_rate() -> f64 {
    1e-3
}
fn default_patience() -> usize {
    10
}
fn default_retrain_epochs() -> usize {
    100
}
fn default_validation_fraction() -> f64 {
    0.1
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: default_batch_size(),
            learning_rate: default_learning_rate(),
            max_epochs: 100,
            early_stop_patience: default_patience(),
            retrain_epochs: default_retrain_epochs(),
            validation_intervals: None,
            validation_fraction: default_validation_fraction(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if self.early_stop_patience == 0 {
            return Err(Error::Config("early_stop_patience must be at least 1".into()));
        }
        if self.max_epochs == 0 {
            return Err(Error::Config("max_epochs must be at least 1".into()));
        }
        if !(self.validation_fraction > 0.0 && self.validation_fraction < 1.0) {
            return Err(Error::Config(format!(
                "validation_fraction must lie in (0, 1), got {}",
                self.validation_fraction
            )));
        }
        Adam::with_learning_rate(self.learning_rate).validate()
    }

    fn validation_len(&self, n: usize) -> Result<usize> {
        let v = match self.validation_intervals {
            Some(v) => v,
            None => ((n as f64 * self.validation_fraction).round() as usize).max(1),
        };
        if v == 0 || v >= n {
            return Err(Error::contract(
                "train",
                format!("validation span of {v} leaves no room in {n} instances"),
            ));
        }
        Ok(v)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    EarlyStop,
    Retrain,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based, counted across both phases.
    pub epoch: usize,
    pub phase: Phase,
    pub train_loss: f64,
    /// Unscaled validation RMSE; only tracked during early stopping.
    pub val_rmse: Option<f64>,
    pub seconds: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
    /// Last early-stopping epoch that ran.
    pub stopped_epoch: usize,
    pub best_epoch: usize,
    pub best_val_rmse: f64,
}

impl TrainReport {
    /// `epoch,train_loss,val_rmse`; retrain epochs leave `val_rmse` empty.
    pub fn write_csv<W: Write>(&self, mut sink: W) -> Result<()> {
        writeln!(sink, "epoch,train_loss,val_rmse")?;
        for e in &self.epochs {
            match e.val_rmse {
                Some(v) => writeln!(sink, "{},{},{}", e.epoch, e.train_loss, v)?,
                None => writeln!(sink, "{},{},", e.epoch, e.train_loss)?,
            }
        }
        Ok(())
    }
}

/// One optimizer step on `batch`; returns the loss before the update.
pub fn train_step(model: &mut StarModel, adam: &mut AdamState, batch: &[&TrainingInstance]) -> Result<f64> {
    let (x, e, y) = collate(batch)?;
    let mut tape = Tape::new();
    let x = tape.constant(x);
    let e = e.map(|e| tape.constant(e));
    let y = tape.constant(y);
    let loss = model.loss_on(&mut tape, x, e, y)?;
    let value = tape.value(loss).item().expect("scalar loss") as f64;
    if !value.is_finite() {
        return Ok(value);
    }
    let params = model.params_mut();
    params.zero_grads();
    tape.backward_into(loss, params)?;
    adam.step(params)?;
    Ok(value)
}

fn run_epoch(
    model: &mut StarModel,
    adam: &mut AdamState,
    data: &[TrainingInstance],
    batch_size: usize,
    rng: &mut ChaCha8Rng,
    epoch: usize,
) -> Result<f64> {
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(rng);
    let mut total = 0.0;
    for chunk in order.chunks(batch_size) {
        let batch: Vec<_> = chunk.iter().map(|&i| &data[i]).collect();
        let loss = train_step(model, adam, &batch)?;
        if !loss.is_finite() {
            return Err(Error::Divergence { epoch });
        }
        total += loss * batch.len() as f64;
    }
    Ok(total / data.len() as f64)
}

/// Trains in place. The last `validation_len` instances (in the order given)
/// form the early-stopping set; the retrain phase uses every instance.
pub fn train(
    model: &mut StarModel,
    instances: &[TrainingInstance],
    cfg: &TrainConfig,
    scaler: &MinMaxScaler,
) -> Result<TrainReport> {
    cfg.validate()?;
    if instances.is_empty() {
        return Err(Error::contract("train", "no training instances"));
    }
    let n_val = cfg.validation_len(instances.len())?;
    let (fit, val) = instances.split_at(instances.len() - n_val);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let adam = Adam::with_learning_rate(cfg.learning_rate);
    let mut report = TrainReport {
        best_val_rmse: f64::INFINITY,
        ..Default::default()
    };

    let mut state = adam.init(model.params())?;
    let mut best = model.params().clone();
    let mut stale = 0;
    for epoch in 1..=cfg.max_epochs {
        let clock = Instant::now();
        let loss = run_epoch(model, &mut state, fit, cfg.batch_size, &mut rng, epoch)?;
        let v = evaluate_rmse(model, val, scaler)?;
        report.epochs.push(EpochRecord {
            epoch,
            phase: Phase::EarlyStop,
            train_loss: loss,
            val_rmse: Some(v),
            seconds: clock.elapsed().as_secs_f64(),
        });
        report.stopped_epoch = epoch;
        if v < report.best_val_rmse {
            report.best_val_rmse = v;
            report.best_epoch = epoch;
            best = model.params().clone();
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.early_stop_patience {
                break;
            }
        }
    }
    model.params_mut().copy_values_from(&best)?;

    let mut state = adam.init(model.params())?;
    for i in 1..=cfg.retrain_epochs {
        let epoch = report.stopped_epoch + i;
        let clock = Instant::now();
        let loss = run_epoch(model, &mut state, instances, cfg.batch_size, &mut rng, epoch)?;
        report.epochs.push(EpochRecord {
            epoch,
            phase: Phase::Retrain,
            train_loss: loss,
            val_rmse: None,
            seconds: clock.elapsed().as_secs_f64(),
        });
    }
    Ok(report)
}
