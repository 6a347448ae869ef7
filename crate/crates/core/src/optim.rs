//! AdamW with decoupled weight decay and a linear learning-rate schedule
//! that decays to zero over a fixed horizon.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// `base·(1 − step/horizon)`, floored at zero. Step 0 is the first update.
#[derive(Clone, Copy, Debug)]
pub struct LinearSchedule {
    pub base: f64,
    pub horizon: usize,
}

impl LinearSchedule {
    pub fn lr_at(&self, step: usize) -> f64 {
        if self.horizon == 0 {
            return self.base;
        }
        let frac = 1.0 - step as f64 / self.horizon as f64;
        self.base * frac.max(0.0)
    }
}

struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
}

/// Optimizer state: first/second moments per parameter slot plus the step
/// counter. Slots are positional; callers must pass parameters and
/// gradients in the same order every step.
pub struct AdamW {
    cfg: AdamWConfig,
    schedule: LinearSchedule,
    step: usize,
    moments: Vec<Moments>,
}

impl AdamW {
    pub fn new(cfg: AdamWConfig, horizon: usize) -> Self {
        AdamW {
            cfg,
            schedule: LinearSchedule {
                base: cfg.lr,
                horizon,
            },
            step: 0,
            moments: Vec::new(),
        }
    }

    pub fn step_count(&self) -> usize {
        self.step
    }

    /// Learning rate the next `step` call will use.
    pub fn next_lr(&self) -> f64 {
        self.schedule.lr_at(self.step)
    }

    /// One update over all parameter slots. `grads[i]` of `None` means the
    /// loss did not touch that parameter this step; decay still applies.
    /// Returns the learning rate used.
    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[Option<&Tensor>]) -> Result<f64> {
        if params.len() != grads.len() {
            return Err(Error::Contract(format!(
                "{} parameter slots but {} gradient slots",
                params.len(),
                grads.len()
            )));
        }
        if self.moments.is_empty() {
            self.moments = params
                .iter()
                .map(|p| Moments {
                    m: vec![0.0; p.numel()],
                    v: vec![0.0; p.numel()],
                })
                .collect();
        } else if self.moments.len() != params.len() {
            return Err(Error::Contract(format!(
                "optimizer was built for {} slots, got {}",
                self.moments.len(),
                params.len()
            )));
        }
        let lr = self.schedule.lr_at(self.step);
        let t = (self.step + 1) as i32;
        let bc1 = 1.0 - self.cfg.beta1.powi(t);
        let bc2 = 1.0 - self.cfg.beta2.powi(t);
        for (slot, (param, grad)) in params.iter_mut().zip(grads).enumerate() {
            if let Some(g) = grad {
                if g.shape() != param.shape() {
                    return Err(Error::Contract(format!(
                        "slot {slot}: gradient shape {:?} does not match parameter shape {:?}",
                        g.shape(),
                        param.shape()
                    )));
                }
            }
            let state = &mut self.moments[slot];
            let decay = 1.0 - lr * self.cfg.weight_decay;
            let data = param.data_mut();
            for (k, value) in data.iter_mut().enumerate() {
                *value *= decay;
                let gk = grad.map_or(0.0, |g| g.data()[k]);
                state.m[k] = self.cfg.beta1 * state.m[k] + (1.0 - self.cfg.beta1) * gk;
                state.v[k] = self.cfg.beta2 * state.v[k] + (1.0 - self.cfg.beta2) * gk * gk;
                let m_hat = state.m[k] / bc1;
                let v_hat = state.v[k] / bc2;
                *value -= lr * m_hat / (v_hat.sqrt() + self.cfg.eps);
            }
        }
        self.step += 1;
        Ok(lr)
    }
}
