//! SGD with momentum and a cosine-annealed learning rate.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::Matrix;
use crate::model::{Gradients, TwoTowerModel};

pub const DEFAULT_LR: f64 = 3e-3;
pub const DEFAULT_MOMENTUM: f64 = 0.9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CosineSchedule {
    base_lr: f64,
    total_steps: usize,
    eta_min: f64,
}

impl CosineSchedule {
    pub fn new(base_lr: f64, total_steps: usize, eta_min: f64) -> Result<Self> {
        if !(base_lr > 0.0 && base_lr.is_finite()) {
            return Err(Error::Config(format!("base_lr must be positive, got {base_lr}")));
        }
        if total_steps == 0 {
            return Err(Error::Config("total_steps must be >= 1".into()));
        }
        if !(eta_min >= 0.0 && eta_min <= base_lr) {
            return Err(Error::Config(format!(
                "eta_min must be in [0, base_lr], got {eta_min}"
            )));
        }
        Ok(Self {
            base_lr,
            total_steps,
            eta_min,
        })
    }

    pub fn base_lr(&self) -> f64 {
        self.base_lr
    }

    pub fn total_steps(&self) -> usize {
        self.total_steps
    }

    pub fn eta_min(&self) -> f64 {
        self.eta_min
    }

    /// `eta_min + (base_lr - eta_min) (1 + cos(π step / total_steps)) / 2`.
    pub fn lr_at(&self, step: usize) -> Result<f64> {
        if step > self.total_steps {
            return Err(Error::Schedule {
                step,
                total_steps: self.total_steps,
            });
        }
        let progress = step as f64 / self.total_steps as f64;
        Ok(self.eta_min + (self.base_lr - self.eta_min) * 0.5 * (1.0 + (PI * progress).cos()))
    }
}

pub fn lr_at(schedule: &CosineSchedule, step: usize) -> Result<f64> {
    schedule.lr_at(step)
}

/// Momentum buffers, one per parameter tensor (plus one for `ln τ`).
#[derive(Debug, Clone, PartialEq)]
pub struct SgdState {
    buffers: Vec<Matrix>,
    log_temperature_buffer: f64,
    momentum: f64,
    weight_decay: f64,
}

impl SgdState {
    pub fn new(model: &TwoTowerModel, momentum: f64, weight_decay: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::Config(format!("momentum must be in [0, 1), got {momentum}")));
        }
        if !(weight_decay >= 0.0 && weight_decay.is_finite()) {
            return Err(Error::Config(format!(
                "weight_decay must be >= 0, got {weight_decay}"
            )));
        }
        Ok(Self {
            buffers: model
                .tensors()
                .iter()
                .map(|m| Matrix::zeros(m.rows(), m.cols()))
                .collect(),
            log_temperature_buffer: 0.0,
            momentum,
            weight_decay,
        })
    }

    pub fn from_parts(
        buffers: Vec<Matrix>,
        log_temperature_buffer: f64,
        momentum: f64,
        weight_decay: f64,
    ) -> Self {
        Self {
            buffers,
            log_temperature_buffer,
            momentum,
            weight_decay,
        }
    }

    pub fn buffers(&self) -> &[Matrix] {
        &self.buffers
    }

    pub fn log_temperature_buffer(&self) -> f64 {
        self.log_temperature_buffer
    }

    pub fn momentum(&self) -> f64 {
        self.momentum
    }

    pub fn weight_decay(&self) -> f64 {
        self.weight_decay
    }
}

/// One momentum step on a flat parameter slice:
/// `buf <- momentum * buf + grad (+ wd * param)`, `param <- param - lr * buf`.
pub fn sgd_update_slice(
    params: &mut [f64],
    grads: &[f64],
    buffer: &mut [f64],
    momentum: f64,
    weight_decay: f64,
    lr: f64,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != buffer.len() {
        return Err(Error::Optimizer(format!(
            "length mismatch: params {}, grads {}, buffer {}",
            params.len(),
            grads.len(),
            buffer.len()
        )));
    }
    for ((p, &g), b) in params.iter_mut().zip(grads).zip(buffer.iter_mut()) {
        let mut d = g;
        if weight_decay != 0.0 {
            d += weight_decay * *p;
        }
        *b = momentum * *b + d;
        *p -= lr * *b;
    }
    Ok(())
}

/// Applies one step to every model parameter. A learnable temperature is
/// stepped in log space.
pub fn sgd_step(
    model: &mut TwoTowerModel,
    grads: &Gradients,
    state: &mut SgdState,
    lr: f64,
) -> Result<()> {
    let params = model.tensors_mut();
    let grad_tensors = grads.tensors();
    if params.len() != grad_tensors.len() || params.len() != state.buffers.len() {
        return Err(Error::Optimizer(format!(
            "tensor count mismatch: params {}, grads {}, buffers {}",
            params.len(),
            grad_tensors.len(),
            state.buffers.len()
        )));
    }
    for (i, ((p, g), b)) in params
        .into_iter()
        .zip(grad_tensors)
        .zip(state.buffers.iter_mut())
        .enumerate()
    {
        if p.shape() != g.shape() || p.shape() != b.shape() {
            return Err(Error::Optimizer(format!(
                "tensor {i}: param {:?}, grad {:?}, buffer {:?}",
                p.shape(),
                g.shape(),
                b.shape()
            )));
        }
        sgd_update_slice(
            p.data_mut(),
            g.data(),
            b.data_mut(),
            state.momentum,
            state.weight_decay,
            lr,
        )?;
    }
    if model.learnable_temperature() {
        let g = grads.log_temperature.ok_or_else(|| {
            Error::Optimizer("learnable temperature but no temperature gradient".into())
        })?;
        let mut log_tau = [model.temperature().ln()];
        sgd_update_slice(
            &mut log_tau,
            &[g],
            std::slice::from_mut(&mut state.log_temperature_buffer),
            state.momentum,
            0.0,
            lr,
        )?;
        model.set_temperature(log_tau[0].exp())?;
    }
    Ok(())
}
