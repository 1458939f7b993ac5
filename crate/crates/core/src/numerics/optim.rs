use std::f64::consts::PI;

use super::{ParamSet, Real};
use crate::error::{Error, Result};

/// Cosine learning-rate decay from `lr` to zero over `total_steps`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CosineSchedule {
    pub total_steps: usize,
}

impl CosineSchedule {
    pub fn factor(&self, step: usize) -> f64 {
        if self.total_steps == 0 {
            return 1.0;
        }
        let t = (step.min(self.total_steps)) as f64 / self.total_steps as f64;
        0.5 * (1.0 + (PI * t).cos())
    }
}

/// SGD with heavy-ball momentum: `v <- momentum * v + grad; p <- p - lr * v`.
#[derive(Debug, Clone)]
pub struct Sgd<T> {
    pub lr: f64,
    pub momentum: f64,
    pub schedule: Option<CosineSchedule>,
    step: usize,
    velocity: Vec<Vec<T>>,
}

impl<T: Real> Sgd<T> {
    pub fn new(lr: f64, momentum: f64) -> Self {
        Sgd {
            lr,
            momentum,
            schedule: None,
            step: 0,
            velocity: Vec::new(),
        }
    }

    pub fn with_cosine(mut self, total_steps: usize) -> Self {
        self.schedule = Some(CosineSchedule { total_steps });
        self
    }

    pub fn steps_taken(&self) -> usize {
        self.step
    }

    pub fn current_lr(&self) -> f64 {
        self.lr * self.schedule.map_or(1.0, |s| s.factor(self.step))
    }

    /// Applies one update to every trainable tensor and zeroes all gradients.
    /// A non-finite gradient aborts before anything is modified.
    pub fn step(&mut self, params: &mut ParamSet<T>) -> Result<()> {
        if let Some(bad) = params
            .iter()
            .find(|p| p.trainable && p.grad.iter().any(|g| !g.is_finite()))
        {
            return Err(Error::NonFiniteGradient { name: bad.name.clone() });
        }
        if self.velocity.len() != params.len() {
            self.velocity = params.iter().map(|p| vec![T::zero(); p.numel()]).collect();
        }
        let lr = T::of(self.current_lr());
        let mom = T::of(self.momentum);
        for (p, v) in params.iter_mut().zip(&mut self.velocity) {
            if p.trainable {
                for ((w, g), vel) in p.values.iter_mut().zip(&p.grad).zip(v.iter_mut()) {
                    *vel = mom * *vel + *g;
                    *w -= lr * *vel;
                }
            }
        }
        params.zero_grads();
        self.step += 1;
        Ok(())
    }
}
