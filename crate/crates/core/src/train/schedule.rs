use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LrSchedule {
    #[default]
    Cosine,
    Constant,
}

/// `lr_min + ½(lr_initial − lr_min)(1 + cos(π·epoch/total))`.
pub fn cosine_annealing_lr(epoch: usize, total: usize, lr_initial: f64, lr_min: f64) -> Result<f64> {
    if total == 0 {
        return Err(Error::Parameter("cosine schedule needs at least one epoch".into()));
    }
    if epoch > total {
        return Err(Error::Parameter(format!("epoch {epoch} beyond schedule length {total}")));
    }
    // Endpoints are returned directly so they are exact.
    if epoch == 0 {
        return Ok(lr_initial);
    }
    if epoch == total {
        return Ok(lr_min);
    }
    let c = (PI * epoch as f64 / total as f64).cos();
    Ok(lr_min + 0.5 * (lr_initial - lr_min) * (1.0 + c))
}

impl LrSchedule {
    pub fn lr(self, epoch: usize, total: usize, lr_initial: f64, lr_min: f64) -> Result<f64> {
        match self {
            LrSchedule::Cosine => cosine_annealing_lr(epoch, total, lr_initial, lr_min),
            LrSchedule::Constant => Ok(lr_initial),
        }
    }
}
