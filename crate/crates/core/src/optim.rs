//! SGD with momentum and weight decay, plus step learning-rate schedules.

use crate::error::{Error, Result};
use crate::layers::Param;
use crate::tensor::{Scalar, Tensor};

/// Piecewise-constant schedule: the base rate times every multiplier whose
/// milestone epoch has been reached.
#[derive(Debug, Clone, PartialEq)]
pub struct LrSchedule {
    pub base_rate: f64,
    pub milestones: Vec<(usize, f64)>,
}

impl LrSchedule {
    pub fn new(base_rate: f64, milestones: Vec<(usize, f64)>) -> Result<Self> {
        if !(base_rate > 0.0 && base_rate.is_finite()) {
            return Err(Error::Config(format!("learning rate must be positive, got {base_rate}")));
        }
        for pair in milestones.windows(2) {
            if pair[1].0 <= pair[0].0 {
                return Err(Error::Config("milestone epochs must be strictly increasing".into()));
            }
        }
        if let Some((epoch, m)) = milestones.iter().find(|(_, m)| !(*m > 0.0 && m.is_finite())) {
            return Err(Error::Config(format!("multiplier at epoch {epoch} must be positive, got {m}")));
        }
        Ok(LrSchedule {
            base_rate,
            milestones,
        })
    }

    pub fn constant(base_rate: f64) -> Result<Self> {
        Self::new(base_rate, Vec::new())
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.milestones
            .iter()
            .filter(|(at, _)| *at <= epoch)
            .fold(self.base_rate, |lr, (_, m)| lr * m)
    }
}

/// Momentum SGD state. Velocities are allocated lazily on the first step and
/// follow the parameter order of that step.
#[derive(Debug, Clone)]
pub struct Sgd<T: Scalar> {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    velocities: Vec<Tensor<T>>,
}

impl<T: Scalar> Sgd<T> {
    pub fn new(learning_rate: f64, momentum: f64, weight_decay: f64) -> Self {
        Sgd {
            learning_rate,
            momentum,
            weight_decay,
            velocities: Vec::new(),
        }
    }

    pub fn velocities(&self) -> &[Tensor<T>] {
        &self.velocities
    }

    pub fn set_velocities(&mut self, velocities: Vec<Tensor<T>>) {
        self.velocities = velocities;
    }

    /// `v <- mu*v - lr*(g + wd*theta)`, `theta <- theta + v`.
    ///
    /// Weight decay only applies to weights and biases; `alpha` is clamped
    /// back into its range afterwards. Frozen parameters are skipped.
    pub fn step(&mut self, mut params: Vec<&mut Param<T>>) -> Result<()> {
        if self.velocities.is_empty() {
            self.velocities = params.iter().map(|p| p.value.zeros_like()).collect();
        }
        if self.velocities.len() != params.len() {
            return Err(Error::Config(format!(
                "optimizer tracks {} parameters, got {}",
                self.velocities.len(),
                params.len()
            )));
        }
        for p in &params {
            if !p.grad.is_finite() {
                return Err(Error::NonFiniteGradient {
                    param: p.name.clone(),
                });
            }
        }
        let lr = T::from_f64_lossy(self.learning_rate);
        let mu = T::from_f64_lossy(self.momentum);
        for (p, v) in params.iter_mut().zip(&mut self.velocities) {
            v.expect_same_shape("sgd_step", &p.value)?;
            if p.frozen {
                continue;
            }
            let wd = T::from_f64_lossy(if p.role.decays() { self.weight_decay } else { 0.0 });
            let Param { value, grad, .. } = &mut **p;
            for ((theta, &g), vel) in value
                .as_mut_slice()
                .iter_mut()
                .zip(grad.as_slice())
                .zip(v.as_mut_slice())
            {
                *vel = mu * *vel - lr * (g + wd * *theta);
                *theta = *theta + *vel;
            }
            if let Some((lo, hi)) = p.role.clamp_range() {
                let (lo, hi) = (T::from_f64_lossy(lo), T::from_f64_lossy(hi));
                for theta in p.value.as_mut_slice() {
                    *theta = theta.max(lo).min(hi);
                }
            }
        }
        Ok(())
    }
}
