use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Piecewise-constant learning rate: `base_lr · factor^k`, where `k` counts the
/// milestones at or before the current epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LrSchedule {
    pub base_lr: f64,
    pub milestones: Vec<usize>,
    pub factor: f64,
    pub total_epochs: usize,
}

/// Reference recipe: 180 epochs, decays at 160 and 175.
const REFERENCE_EPOCHS: usize = 180;
const REFERENCE_MILESTONES: [usize; 2] = [160, 175];

impl Default for LrSchedule {
    fn default() -> Self {
        LrSchedule::scaled(REFERENCE_EPOCHS)
    }
}

impl LrSchedule {
    /// The reference milestones rescaled to `total_epochs` by flooring
    /// `m · total / 180`; duplicates and milestones at epoch 0 are dropped.
    pub fn scaled(total_epochs: usize) -> Self {
        let mut milestones: Vec<usize> = REFERENCE_MILESTONES
            .iter()
            .map(|m| m * total_epochs / REFERENCE_EPOCHS)
            .filter(|&m| m > 0 && m < total_epochs)
            .collect();
        milestones.dedup();
        LrSchedule {
            base_lr: 1e-3,
            milestones,
            factor: 0.1,
            total_epochs,
        }
    }

    pub fn constant(lr: f64, total_epochs: usize) -> Self {
        LrSchedule {
            base_lr: lr,
            milestones: Vec::new(),
            factor: 1.0,
            total_epochs,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            problems.push(format!("base_lr must be positive, got {}", self.base_lr));
        }
        if !(self.factor > 0.0 && self.factor <= 1.0) {
            problems.push(format!("factor must lie in (0, 1], got {}", self.factor));
        }
        if self.milestones.windows(2).any(|w| w[0] >= w[1]) {
            problems.push(format!(
                "milestones must be strictly increasing, got {:?}",
                self.milestones
            ));
        }
        if let Some(&last) = self.milestones.last() {
            if last >= self.total_epochs {
                problems.push(format!(
                    "milestone {last} is not below total_epochs {}",
                    self.total_epochs
                ));
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(problems))
        }
    }

    pub fn lr_at(&self, epoch: usize) -> Result<f64> {
        if epoch >= self.total_epochs {
            return Err(Error::Validation(vec![format!(
                "epoch {epoch} outside schedule of {} epochs",
                self.total_epochs
            )]));
        }
        let k = self.milestones.iter().filter(|&&m| m <= epoch).count();
        Ok(self.base_lr * self.factor.powi(k as i32))
    }
}
