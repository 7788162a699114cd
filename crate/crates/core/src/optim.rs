//! SGD with momentum and L2 weight decay under a polynomial learning-rate decay.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::model::{Gradients, SegModel};
use crate::scalar::Real;

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields))]
pub struct SgdConfig {
    pub base_lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub poly_power: f64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self { base_lr: 2.5e-4, momentum: 0.9, weight_decay: 5e-4, poly_power: 0.9 }
    }
}

/// `lr(t) = base · (1 − t/T)^power`, clamped to zero past `T`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PolySchedule {
    pub base_lr: f64,
    pub power: f64,
    pub total_steps: u64,
}

impl PolySchedule {
    pub fn lr(&self, step: u64) -> f64 {
        if self.total_steps == 0 || step >= self.total_steps {
            return 0.0;
        }
        let frac = 1.0 - step as f64 / self.total_steps as f64;
        self.base_lr * libm::pow(frac, self.power)
    }
}

#[derive(Clone, Debug)]
pub struct Sgd<T> {
    pub config: SgdConfig,
    pub schedule: PolySchedule,
    pub step: u64,
    velocity: Vec<Vec<T>>,
}

impl<T: Real> Sgd<T> {
    pub fn new(config: SgdConfig, total_steps: u64, model: &SegModel<T>) -> Self {
        let schedule = PolySchedule { base_lr: config.base_lr, power: config.poly_power, total_steps };
        let velocity = model.params().iter().map(|p| vec![T::zero(); p.len()]).collect();
        Self { config, schedule, step: 0, velocity }
    }

    pub fn current_lr(&self) -> f64 {
        self.schedule.lr(self.step)
    }

    /// Applies one update. A non-finite loss or gradient aborts the step and leaves the model untouched.
    pub fn step(&mut self, model: &mut SegModel<T>, loss: f64, grads: &Gradients<T>) -> Result<()> {
        if !loss.is_finite() || !grads.is_finite() {
            return Err(Error::NonFiniteLoss { step: self.step, value: loss });
        }
        let lr = T::of(self.current_lr());
        let mu = T::of(self.config.momentum);
        let wd = T::of(self.config.weight_decay);
        for ((param, grad), vel) in model.params_mut().into_iter().zip(&grads.tensors).zip(&mut self.velocity) {
            for ((p, &g), v) in param.iter_mut().zip(grad).zip(vel.iter_mut()) {
                *v = mu * *v + g + wd * *p;
                *p -= lr * *v;
            }
        }
        self.step += 1;
        Ok(())
    }
}
