//! Weight of the labeling loss over training.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Linear decay of the labeling weight down to a floor.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Schedule {
    pub horizon: u64,
    pub floor: f64,
}

impl Default for Schedule {
    fn default() -> Self {
        Self {
            horizon: 100_000,
            floor: 0.2,
        }
    }
}

impl Schedule {
    pub fn validate(&self) -> Result<()> {
        if self.horizon == 0 {
            return Err(Error::Config("schedule horizon must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.floor) {
            return Err(Error::Config(format!("schedule floor {} outside [0, 1]", self.floor)));
        }
        Ok(())
    }
}

pub fn lambda_at(update_num: u64, schedule: &Schedule) -> f64 {
    (1.0 - update_num as f64 / schedule.horizon as f64).max(schedule.floor)
}
