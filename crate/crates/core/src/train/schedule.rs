//! Cosine-decay learning rate with warm restarts.

use crate::error::{config_err, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainSchedule {
    pub max_lr: f64,
    pub min_lr: f64,
    pub cycle_length_epochs: usize,
    /// Factor applied to the cycle length after each restart.
    pub cycle_mult: usize,
    pub total_epochs: usize,
    pub batch_size: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for TrainSchedule {
    fn default() -> Self {
        TrainSchedule {
            max_lr: 0.1,
            min_lr: 1e-5,
            cycle_length_epochs: 20,
            cycle_mult: 1,
            total_epochs: 60,
            batch_size: 32,
            momentum: 0.9,
            weight_decay: 1e-4,
            seed: 0,
        }
    }
}

impl TrainSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.min_lr < self.max_lr) || !(self.min_lr >= 0.0) {
            return Err(config_err(format!("need 0 <= min_lr < max_lr, got {} and {}", self.min_lr, self.max_lr)));
        }
        if self.cycle_length_epochs == 0 || self.cycle_mult == 0 {
            return Err(config_err("cycle_length_epochs and cycle_mult must be >= 1"));
        }
        if self.batch_size < 2 {
            return Err(config_err(format!("batch_size must be >= 2 for batch norm, got {}", self.batch_size)));
        }
        if !(0.0..1.0).contains(&self.momentum) || !(self.weight_decay >= 0.0) {
            return Err(config_err("momentum must be in [0, 1) and weight_decay >= 0"));
        }
        Ok(())
    }
}

/// `min + (max - min) * (1 + cos(pi * t / period)) / 2`.
pub fn cosine_lr(t: usize, period: usize, min_lr: f64, max_lr: f64) -> f64 {
    let frac = t as f64 / period as f64;
    min_lr + 0.5 * (max_lr - min_lr) * (1.0 + (std::f64::consts::PI * frac).cos())
}

/// Learning rate at global `step`. Cycles span `cycle_length_epochs *
/// steps_per_epoch` steps, growing by `cycle_mult` after each restart; the
/// first step of every cycle uses `max_lr`.
pub fn cosine_restart_lr(step: usize, schedule: &TrainSchedule, steps_per_epoch: usize) -> f64 {
    let mut period = (schedule.cycle_length_epochs * steps_per_epoch).max(1);
    let mut t = step;
    while t >= period {
        t -= period;
        period *= schedule.cycle_mult;
    }
    cosine_lr(t, period, schedule.min_lr, schedule.max_lr)
}
