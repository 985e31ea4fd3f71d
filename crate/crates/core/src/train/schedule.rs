//! Learning-rate schedules.

use crate::error::{invalid, Result};

pub const POLY_POWER: f64 = 0.9;

/// `base_lr * (1 - iter / total_iter)^power`.
pub fn poly_lr(iter: usize, total_iter: usize, base_lr: f64, power: f64) -> Result<f64> {
    if total_iter == 0 || iter > total_iter {
        return Err(invalid("poly_lr", format!("iteration {iter} outside [0, {total_iter}]")));
    }
    Ok(base_lr * (1.0 - iter as f64 / total_iter as f64).powf(power))
}

/// Half-cosine decay from `base_lr` at epoch 0 to 0 at `total_epochs`.
pub fn cosine_lr(epoch: usize, total_epochs: usize, base_lr: f64) -> Result<f64> {
    if total_epochs == 0 || epoch > total_epochs {
        return Err(invalid("cosine_lr", format!("epoch {epoch} outside [0, {total_epochs}]")));
    }
    Ok(base_lr * 0.5 * (1.0 + (std::f64::consts::PI * epoch as f64 / total_epochs as f64).cos()))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Schedule {
    Poly { power: f64 },
    Cosine,
    Constant,
}

impl Schedule {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "poly" => Ok(Schedule::Poly { power: POLY_POWER }),
            "cosine" => Ok(Schedule::Cosine),
            "constant" => Ok(Schedule::Constant),
            other => Err(invalid("schedule", format!("unknown schedule '{other}' (poly | cosine | constant)"))),
        }
    }

    /// Rate for a step. Poly decays per iteration, cosine per epoch.
    pub fn lr(&self, base_lr: f64, iter: usize, total_iter: usize, epoch: usize, total_epochs: usize) -> Result<f64> {
        match *self {
            Schedule::Poly { power } => poly_lr(iter, total_iter, base_lr, power),
            Schedule::Cosine => cosine_lr(epoch, total_epochs, base_lr),
            Schedule::Constant => Ok(base_lr),
        }
    }
}
