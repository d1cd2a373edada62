//! Reciprocal-square-root learning rate with linear warmup and cooldown.

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Schedule {
    pub peak_lr: f64,
    pub warmup: usize,
    pub cooldown: usize,
    pub total: usize,
}

impl Schedule {
    pub fn new(peak_lr: f64, warmup: usize, cooldown: usize, total: usize) -> Result<Self> {
        let s = Schedule { peak_lr, warmup, cooldown, total };
        s.validate()?;
        Ok(s)
    }

    /// 10k warmup, 30k cooldown, 177k steps, peak 1e-3.
    pub fn vit_22b() -> Self {
        Schedule { peak_lr: 1e-3, warmup: 10_000, cooldown: 30_000, total: 177_000 }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.peak_lr > 0.0 && self.peak_lr.is_finite()) {
            return Err(Error::Config(format!("peak_lr must be positive, got {}", self.peak_lr)));
        }
        if self.warmup == 0 {
            return Err(Error::Config("warmup must be at least one step".into()));
        }
        if self.warmup + self.cooldown > self.total {
            return Err(Error::Config(format!(
                "warmup {} + cooldown {} exceed total {}",
                self.warmup, self.cooldown, self.total
            )));
        }
        Ok(())
    }

    /// First step of the cooldown.
    pub fn cooldown_start(&self) -> usize {
        self.total - self.cooldown
    }

    /// `peak · step / warmup`.
    pub fn warmup_value(&self, step: usize) -> f64 {
        self.peak_lr * step as f64 / self.warmup as f64
    }

    /// `peak · sqrt(warmup / step)`; equals the peak at `step == warmup`.
    pub fn main_value(&self, step: usize) -> f64 {
        self.peak_lr * (self.warmup as f64 / step as f64).sqrt()
    }

    /// Linear from the main-phase value at the cooldown start to 0 at `total`.
    pub fn cooldown_value(&self, step: usize) -> f64 {
        let c0 = self.cooldown_start();
        self.main_value(c0) * ((self.total - step) as f64 / self.cooldown as f64)
    }

    /// Learning rate for `step ∈ [0, total]`; with a cooldown, `total` yields 0.
    pub fn lr_at(&self, step: usize) -> Result<f64> {
        if step > self.total {
            return Err(Error::Domain(format!("step {step} beyond schedule total {}", self.total)));
        }
        Ok(if step < self.warmup {
            self.warmup_value(step)
        } else if self.cooldown > 0 && step >= self.cooldown_start() {
            self.cooldown_value(step)
        } else {
            self.main_value(step)
        })
    }
}
