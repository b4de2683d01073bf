//! Cosine learning-rate decay.

use crate::error::{Error, Result};

pub const DEFAULT_LR_MAX: f64 = 8e-3;
pub const DEFAULT_LR_MIN: f64 = 1.6e-6;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScheduleConfig {
    pub lr_max: f64,
    pub lr_min: f64,
    pub total_steps: usize,
}

impl ScheduleConfig {
    pub fn new(lr_max: f64, lr_min: f64, total_steps: usize) -> Result<Self> {
        let cfg = ScheduleConfig {
            lr_max,
            lr_min,
            total_steps,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr_max > self.lr_min && self.lr_min > 0.0 && self.lr_max.is_finite()) {
            return Err(Error::Config(format!(
                "ScheduleConfig needs lr_max > lr_min > 0, got {} and {}",
                self.lr_max, self.lr_min
            )));
        }
        if self.total_steps == 0 {
            return Err(Error::Config("ScheduleConfig.total_steps must be at least 1".into()));
        }
        Ok(())
    }
}

/// `lr_min + (lr_max - lr_min) * (1 + cos(pi t / T)) / 2`, clamped to
/// `lr_min` past `T`. Written as a convex combination so both endpoints are
/// reproduced exactly.
pub fn cosine_lr(step: usize, cfg: &ScheduleConfig) -> f64 {
    if step >= cfg.total_steps {
        return cfg.lr_min;
    }
    let frac = step as f64 / cfg.total_steps as f64;
    let w = 0.5 * (1.0 + (std::f64::consts::PI * frac).cos());
    cfg.lr_max * w + cfg.lr_min * (1.0 - w)
}
