//! Optimization: schedule, Adam, early stopping and the epoch loop.

mod adam;
mod fit;

pub use adam::adam_step;
pub use fit::{
    evaluate, fit, fit_with, predict_probs, stack_batch, validation_dice, FitOptions, FitOutcome,
    SampleEval, BEST_CHECKPOINT, LAST_CHECKPOINT,
};

use std::fmt::Write as _;

use lsenet_tensor::Tensor;

use crate::error::{arg_err, config_err, Result};
use crate::params::ParamStore;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr0: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub poly_power: f64,
    pub patience: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub augment: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr0: 5e-4,
            weight_decay: 1e-4,
            epochs: 500,
            batch_size: 2,
            poly_power: 0.9,
            patience: 100,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            augment: true,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return config_err(format!("lr0 must be positive, got {}", self.lr0));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return config_err(format!(
                "weight_decay must be >= 0, got {}",
                self.weight_decay
            ));
        }
        if self.epochs == 0 {
            return config_err("epochs must be >= 1");
        }
        if self.batch_size == 0 {
            return config_err("batch_size must be >= 1");
        }
        if !(self.poly_power >= 0.0 && self.poly_power.is_finite()) {
            return config_err(format!("poly_power must be >= 0, got {}", self.poly_power));
        }
        if self.patience == 0 {
            return config_err("patience must be >= 1");
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(b > 0.0 && b < 1.0) {
                return config_err(format!("{name} must lie in (0, 1), got {b}"));
            }
        }
        if !(self.eps > 0.0) {
            return config_err(format!("eps must be positive, got {}", self.eps));
        }
        Ok(())
    }
}

/// `lr0 · (1 - epoch/epochs)^power`.
pub fn poly_lr(epoch: usize, cfg: &TrainConfig) -> Result<f64> {
    if epoch > cfg.epochs {
        return arg_err(format!(
            "epoch {epoch} beyond the {}-epoch schedule",
            cfg.epochs
        ));
    }
    Ok(cfg.lr0 * (1.0 - epoch as f64 / cfg.epochs as f64).powf(cfg.poly_power))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HistoryRow {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    /// NaN when no validation set was given.
    pub val_dice: f64,
}

pub const HISTORY_HEADER: &str = "epoch,lr,train_loss,val_dice";

impl HistoryRow {
    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{},{}",
            self.epoch, self.lr, self.train_loss, self.val_dice
        )
    }

    pub fn from_csv(line: &str) -> Option<Self> {
        let mut f = line.split(',');
        let row = Self {
            epoch: f.next()?.parse().ok()?,
            lr: f.next()?.parse().ok()?,
            train_loss: f.next()?.parse().ok()?,
            val_dice: f.next()?.parse().ok()?,
        };
        f.next().is_none().then_some(row)
    }
}

pub fn history_csv(rows: &[HistoryRow]) -> String {
    let mut s = String::from(HISTORY_HEADER);
    s.push('\n');
    for r in rows {
        let _ = writeln!(s, "{}", r.to_csv());
    }
    s
}

/// Everything needed to continue a run exactly where it stopped.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    /// Optimizer steps taken.
    pub step: u64,
    /// Epochs completed; the next epoch to run.
    pub epoch: usize,
    pub m: Vec<Tensor<f32>>,
    pub v: Vec<Tensor<f32>>,
    pub best_val_dice: f64,
    pub best_epoch: Option<usize>,
    pub epochs_since_best: usize,
    /// Root of the per-epoch shuffling/augmentation streams.
    pub seed: u64,
    pub history: Vec<HistoryRow>,
}

impl TrainState {
    pub fn new(params: &ParamStore<f32>, seed: u64) -> Self {
        let zeros: Vec<_> = params
            .iter()
            .map(|p| Tensor::zeros(p.value.shape().to_vec()))
            .collect();
        Self {
            step: 0,
            epoch: 0,
            m: zeros.clone(),
            v: zeros,
            best_val_dice: f64::NEG_INFINITY,
            best_epoch: None,
            epochs_since_best: 0,
            seed,
            history: Vec::new(),
        }
    }

    /// Records a validation score; returns true when it is a new best.
    pub fn observe(&mut self, epoch: usize, val_dice: f64) -> bool {
        if val_dice > self.best_val_dice {
            self.best_val_dice = val_dice;
            self.best_epoch = Some(epoch);
            self.epochs_since_best = 0;
            true
        } else {
            self.epochs_since_best += 1;
            false
        }
    }

    pub fn should_stop(&self, patience: usize) -> bool {
        self.epochs_since_best >= patience
    }
}
