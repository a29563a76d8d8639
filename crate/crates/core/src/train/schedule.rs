use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Whether the schedule advances per optimizer step or per epoch.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Granularity {
    Step,
    Epoch,
}

/// Linear warmup then cosine annealing.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LrSchedule {
    pub total_steps: usize,
    pub warmup_steps: usize,
    pub peak: f64,
}

impl LrSchedule {
    /// `warmup_steps = round(warmup_fraction · total_steps)`.
    pub fn new(total_steps: usize, warmup_fraction: f64, peak: f64) -> Result<Self> {
        if total_steps == 0 {
            return Err(Error::Config("schedule needs at least one step".into()));
        }
        if !(warmup_fraction > 0.0 && warmup_fraction < 1.0) {
            return Err(Error::Config(format!("warmup_fraction {warmup_fraction} must lie in (0, 1)")));
        }
        let warmup_steps = (warmup_fraction * total_steps as f64).round() as usize;
        if warmup_steps >= total_steps {
            return Err(Error::Config(format!(
                "warmup of {warmup_steps} steps leaves no annealing phase in {total_steps}"
            )));
        }
        Ok(LrSchedule {
            total_steps,
            warmup_steps,
            peak,
        })
    }

    /// Warmup reaches `peak` at `step = warmup_steps − 1` and the cosine starts
    /// from `peak` at `step = warmup_steps`.
    pub fn lr_at(&self, step: usize) -> Result<f64> {
        if step >= self.total_steps {
            return Err(Error::Contract(format!(
                "step {step} outside schedule of {} steps",
                self.total_steps
            )));
        }
        if step < self.warmup_steps {
            return Ok(self.peak * (step + 1) as f64 / self.warmup_steps as f64);
        }
        let progress = (step - self.warmup_steps) as f64 / (self.total_steps - self.warmup_steps) as f64;
        Ok(self.peak * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()))
    }
}
