use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Phase;
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainSchedule {
    pub epochs: usize,
    pub steps_per_epoch: usize,
    pub decay_epochs: Vec<usize>,
    pub decay_factor: f64,
    pub pretrain_epochs: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
}

impl Default for TrainSchedule {
    fn default() -> Self {
        Self {
            epochs: 25,
            steps_per_epoch: 8,
            decay_epochs: vec![15, 20],
            decay_factor: 0.1,
            pretrain_epochs: 5,
            learning_rate: 1e-3,
            weight_decay: 5e-4,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
        }
    }
}

impl TrainSchedule {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.steps_per_epoch == 0 {
            return Err(Error::invalid("epochs and steps per epoch must be positive"));
        }
        if let Some(&e) = self.decay_epochs.iter().find(|&&e| e >= self.epochs) {
            return Err(Error::invalid(format!(
                "decay epoch {e} is not below the {} training epochs",
                self.epochs
            )));
        }
        if self.pretrain_epochs > self.epochs {
            return Err(Error::invalid("pretraining longer than training"));
        }
        if !(self.learning_rate > 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::invalid("learning rate must be positive, weight decay non-negative"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::invalid("moment constants must lie in [0, 1)"));
        }
        Ok(())
    }

    /// Learning rate during zero-based `epoch`: one decay for every decay
    /// epoch already reached.
    pub fn lr_at_epoch(&self, epoch: usize) -> f64 {
        let n = self.decay_epochs.iter().filter(|&&d| epoch >= d).count();
        self.learning_rate * self.decay_factor.powi(n as i32)
    }

    pub fn phase_at_epoch(&self, epoch: usize) -> Phase {
        if epoch < self.pretrain_epochs {
            Phase::Pretrain
        } else {
            Phase::Full
        }
    }

    pub fn total_steps(&self) -> usize {
        self.epochs * self.steps_per_epoch
    }
}

/// Adaptive-moment optimizer with decoupled weight decay: a zero data
/// gradient shrinks every parameter by exactly (1 − lr·wd).
#[derive(Clone, Debug, PartialEq)]
pub struct Adam<T> {
    pub beta1: T,
    pub beta2: T,
    pub eps: T,
    pub weight_decay: T,
    m: Vec<T>,
    v: Vec<T>,
    t: i32,
}

impl<T: Scalar> Adam<T> {
    pub fn new(n: usize, schedule: &TrainSchedule) -> Self {
        Self {
            beta1: T::lit(schedule.beta1),
            beta2: T::lit(schedule.beta2),
            eps: T::lit(schedule.adam_eps),
            weight_decay: T::lit(schedule.weight_decay),
            m: vec![T::zero(); n],
            v: vec![T::zero(); n],
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [T], grad: &[T], lr: T) {
        self.t += 1;
        let one = T::one();
        let c1 = one - self.beta1.powi(self.t);
        let c2 = one - self.beta2.powi(self.t);
        let shrink = one - lr * self.weight_decay;
        for (((p, &g), m), v) in params.iter_mut().zip(grad).zip(&mut self.m).zip(&mut self.v) {
            *m = self.beta1 * *m + (one - self.beta1) * g;
            *v = self.beta2 * *v + (one - self.beta2) * g * g;
            let update = (*m / c1) / ((*v / c2).sqrt() + self.eps);
            *p = *p * shrink - lr * update;
        }
    }
}
