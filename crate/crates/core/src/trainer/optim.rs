use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ScheduleKind {
    Constant,
    CosineAnnealing,
    StepDecay { factor: f64, every: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub initial: f64,
    pub kind: ScheduleKind,
}

impl LrSchedule {
    pub fn constant(initial: f64) -> Self {
        Self {
            initial,
            kind: ScheduleKind::Constant,
        }
    }

    pub fn cosine(initial: f64) -> Self {
        Self {
            initial,
            kind: ScheduleKind::CosineAnnealing,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.initial >= 0.0) || !self.initial.is_finite() {
            return Err(Error::config(format!("learning rate must be finite and >= 0, got {}", self.initial)));
        }
        if let ScheduleKind::StepDecay { factor, every } = self.kind {
            if every == 0 || !(factor > 0.0) || !factor.is_finite() {
                return Err(Error::config("step decay needs a positive factor and period"));
            }
        }
        Ok(())
    }

    /// Rate for `epoch` out of `total` epochs. Cosine annealing reaches
    /// exactly zero at `epoch == total`.
    pub fn rate(&self, epoch: usize, total: usize) -> f64 {
        match self.kind {
            ScheduleKind::Constant => self.initial,
            ScheduleKind::CosineAnnealing => {
                if total == 0 || epoch >= total {
                    return 0.0;
                }
                let progress = epoch as f64 / total as f64;
                self.initial * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
            }
            ScheduleKind::StepDecay { factor, every } => self.initial * factor.powi((epoch / every) as i32),
        }
    }
}

/// Heavy-ball momentum: `v ← μv − lr·g`, `θ ← θ + v`.
pub fn momentum_step(param: &mut Matrix, velocity: &mut Matrix, grad: &Matrix, lr: f64, momentum: f64) -> Result<()> {
    if param.shape() != grad.shape() || velocity.shape() != grad.shape() {
        return Err(Error::shape(
            "momentum_step",
            format!("param {:?}, velocity {:?}, gradient {:?}", param.shape(), velocity.shape(), grad.shape()),
        ));
    }
    for ((p, v), g) in param
        .as_mut_slice()
        .iter_mut()
        .zip(velocity.as_mut_slice())
        .zip(grad.as_slice())
    {
        *v = momentum * *v - lr * g;
        *p += *v;
    }
    Ok(())
}

/// Exact minimizer of `‖M − Y‖²/(2·lr) + α‖M − anchor‖²`, applied in place to
/// `Y`. Stable for any `lr·α`, unlike an explicit gradient step on the
/// penalty.
pub fn drift_prox(param: &mut Matrix, anchor: &Matrix, lr: f64, alpha: f64) -> Result<()> {
    if param.shape() != anchor.shape() {
        return Err(Error::shape("drift_prox", format!("{:?} vs {:?}", param.shape(), anchor.shape())));
    }
    let c = 2.0 * lr * alpha;
    if c == 0.0 {
        return Ok(());
    }
    let inv = 1.0 / (1.0 + c);
    for (p, a) in param.as_mut_slice().iter_mut().zip(anchor.as_slice()) {
        *p = (*p + c * a) * inv;
    }
    Ok(())
}
