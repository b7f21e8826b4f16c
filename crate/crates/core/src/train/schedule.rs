use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One-cycle learning rate: linear warmup from `max_lr / initial_div` to
/// `max_lr`, then cosine annealing to `max_lr / final_div`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OneCycle {
    pub max_lr: f64,
    pub total_steps: usize,
    pub warmup_fraction: f64,
    pub initial_div: f64,
    pub final_div: f64,
}

impl OneCycle {
    pub fn new(max_lr: f64, total_steps: usize) -> Self {
        OneCycle {
            max_lr,
            total_steps,
            warmup_fraction: 0.3,
            initial_div: 25.0,
            final_div: 1e4,
        }
    }

    /// Index of the step that receives exactly `max_lr`.
    pub fn peak_step(&self) -> usize {
        ((self.warmup_fraction * self.total_steps as f64).round() as usize).min(self.total_steps)
    }

    pub fn lr(&self, step: usize) -> Result<f64> {
        if step > self.total_steps {
            return Err(Error::Range(format!(
                "step {step} beyond schedule of {} steps",
                self.total_steps
            )));
        }
        let peak = self.peak_step();
        let start = self.max_lr / self.initial_div;
        let end = self.max_lr / self.final_div;
        if step < peak {
            return Ok(start + (self.max_lr - start) * step as f64 / peak as f64);
        }
        if step == peak {
            return Ok(self.max_lr);
        }
        let t = (step - peak) as f64 / (self.total_steps - peak) as f64;
        Ok(end + (self.max_lr - end) * 0.5 * (1.0 + (std::f64::consts::PI * t).cos()))
    }
}

/// Free-function form of [`OneCycle::lr`] with the default shape.
pub fn onecycle_lr(step: usize, total_steps: usize, max_lr: f64) -> Result<f64> {
    OneCycle::new(max_lr, total_steps).lr(step)
}
