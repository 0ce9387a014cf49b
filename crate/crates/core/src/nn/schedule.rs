//! Linear warmup followed by exponential decay.

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecayGranularity {
    Epoch,
    Step,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub base_lr: f64,
    pub warmup_steps: u64,
    pub start_factor: f64,
    pub gamma: f64,
    pub granularity: DecayGranularity,
    /// Optimizer steps per epoch; used to locate the epoch in which warmup
    /// ends.
    pub steps_per_epoch: u64,
}

impl LrSchedule {
    pub fn new(base_lr: f64, warmup_steps: u64, steps_per_epoch: u64) -> Self {
        LrSchedule {
            base_lr,
            warmup_steps,
            start_factor: 0.5,
            gamma: 0.995,
            granularity: DecayGranularity::Epoch,
            steps_per_epoch: steps_per_epoch.max(1),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.start_factor > 0.0 && self.start_factor <= 1.0) {
            return Err(Error::config(
                "optimizer.start_factor",
                "must lie in (0, 1]",
            ));
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(Error::config("optimizer.gamma", "must lie in (0, 1]"));
        }
        if !(self.base_lr > 0.0) {
            return Err(Error::config("optimizer.lr", "must be positive"));
        }
        Ok(())
    }

    /// Learning rate for optimizer step `step` (0-based) in epoch `epoch`.
    pub fn lr_at(&self, step: u64, epoch: u64) -> f64 {
        if step < self.warmup_steps {
            let frac = step as f64 / self.warmup_steps as f64;
            return self.base_lr * (self.start_factor + (1.0 - self.start_factor) * frac);
        }
        let periods = match self.granularity {
            DecayGranularity::Step => step - self.warmup_steps,
            DecayGranularity::Epoch => {
                epoch.saturating_sub(self.warmup_steps / self.steps_per_epoch.max(1))
            }
        };
        self.base_lr * self.gamma.powf(periods as f64)
    }
}
