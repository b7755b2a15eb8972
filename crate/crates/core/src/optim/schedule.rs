//! Two-stage fine-tuning schedule with stepped learning-rate decay.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FinetuneSchedule {
    pub stage1_epochs: usize,
    pub stage2_epochs: usize,
    pub stage1_lr: f64,
    /// Always exactly stage1_lr / 10.
    pub stage2_lr: f64,
    /// Epochs between decay steps.
    pub step_size: usize,
    pub decay_factor: f64,
}

impl FinetuneSchedule {
    pub fn new(
        stage1_epochs: usize,
        stage2_epochs: usize,
        stage1_lr: f64,
        step_size: usize,
        decay_factor: f64,
    ) -> Result<Self> {
        if stage1_lr <= 0.0 {
            return Err(Error::Config(format!("stage1 lr must be positive, got {stage1_lr}")));
        }
        if step_size == 0 {
            return Err(Error::Config("step_size must be at least 1 epoch".into()));
        }
        if !(decay_factor > 0.0 && decay_factor <= 1.0) {
            return Err(Error::Config(format!(
                "decay_factor must be in (0,1], got {decay_factor}"
            )));
        }
        Ok(FinetuneSchedule {
            stage1_epochs,
            stage2_epochs,
            stage1_lr,
            stage2_lr: stage1_lr / 10.0,
            step_size,
            decay_factor,
        })
    }
}

/// base * factor^floor(epoch / step).
pub fn step_lr(epoch: usize, base_lr: f64, sched: &FinetuneSchedule) -> f64 {
    base_lr * sched.decay_factor.powi((epoch / sched.step_size) as i32)
}
