//! ADAM, RMSProp and the epoch-granular learning-rate schedule.
//!
//! Optimizers work on parameter tensors exposed as flat slices, in a fixed
//! order agreed with the caller (see [`crate::model::Model::parameters_mut`]).

use crate::error::{Error, Result};

pub trait Optimizer {
    /// Updates `params` in place from `grads`. Fails without touching
    /// anything if a gradient is non-finite or shapes disagree.
    fn step(&mut self, params: &mut [&mut [f64]], grads: &[&[f64]], lr: f64) -> Result<()>;
}

fn check_step(state: &[Vec<f64>], params: &[&mut [f64]], grads: &[&[f64]], lr: f64) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.len() {
        return Err(Error::Shape(
            "parameter, gradient and state tensor counts differ".into(),
        ));
    }
    for ((p, g), s) in params.iter().zip(grads).zip(state) {
        if p.len() != g.len() || p.len() != s.len() {
            return Err(Error::Shape("parameter and gradient sizes differ".into()));
        }
    }
    if !(lr > 0.0 && lr.is_finite()) {
        return Err(Error::InvalidConfig(format!(
            "learning rate {lr} must be positive"
        )));
    }
    if grads.iter().any(|g| g.iter().any(|v| !v.is_finite())) {
        return Err(Error::NonFinite("gradient"));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    /// Fresh state with β1 = 0.9, β2 = 0.999, ε = 1e-8.
    pub fn new(sizes: &[usize]) -> Self {
        Self::with_params(sizes, 0.9, 0.999, 1e-8)
    }

    pub fn with_params(sizes: &[usize], beta1: f64, beta2: f64, eps: f64) -> Self {
        Self {
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            t: 0,
            beta1,
            beta2,
            eps,
        }
    }
}

impl Optimizer for AdamState {
    fn step(&mut self, params: &mut [&mut [f64]], grads: &[&[f64]], lr: f64) -> Result<()> {
        check_step(&self.m, params, grads, lr)?;
        self.t += 1;
        let t = self.t as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (((p, g), m), v) in params
            .iter_mut()
            .zip(grads)
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            for i in 0..p.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                p[i] -= lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RmspropState {
    pub mean_square: Vec<Vec<f64>>,
    pub rho: f64,
    pub eps: f64,
}

impl RmspropState {
    /// Fresh state with ρ = 0.9, ε = 1e-8, no momentum.
    pub fn new(sizes: &[usize]) -> Self {
        Self {
            mean_square: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            rho: 0.9,
            eps: 1e-8,
        }
    }
}

impl Optimizer for RmspropState {
    fn step(&mut self, params: &mut [&mut [f64]], grads: &[&[f64]], lr: f64) -> Result<()> {
        check_step(&self.mean_square, params, grads, lr)?;
        for ((p, g), s) in params.iter_mut().zip(grads).zip(&mut self.mean_square) {
            for i in 0..p.len() {
                s[i] = self.rho * s[i] + (1.0 - self.rho) * g[i] * g[i];
                p[i] -= lr * g[i] / (s[i].sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// Holds `lr0` through epoch `hold_until`, then decays geometrically to
/// `lr1` at epoch `end`, and stays there. Epochs are numbered from 1.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LrSchedule {
    pub lr0: f64,
    pub lr1: f64,
    pub hold_until: u32,
    pub end: u32,
}

impl LrSchedule {
    pub fn new(lr0: f64, lr1: f64, hold_until: u32, end: u32) -> Result<Self> {
        let s = Self {
            lr0,
            lr1,
            hold_until,
            end,
        };
        s.validate()?;
        Ok(s)
    }

    /// 1e-4 for 100 epochs, then down to 1e-7 at epoch 400.
    pub fn pretraining() -> Self {
        Self {
            lr0: 1e-4,
            lr1: 1e-7,
            hold_until: 100,
            end: 400,
        }
    }

    /// 1e-5 in the first epoch decaying to 1e-6 in the last.
    pub fn finetuning(epochs: u32) -> Self {
        Self {
            lr0: 1e-5,
            lr1: 1e-6,
            hold_until: 1,
            end: epochs.max(2),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr0 > 0.0 && self.lr1 > 0.0 && self.lr0.is_finite() && self.lr1.is_finite()) {
            return Err(Error::InvalidConfig(
                "learning rates must be positive".into(),
            ));
        }
        if self.hold_until >= self.end {
            return Err(Error::InvalidConfig(format!(
                "hold epoch {} must precede end epoch {}",
                self.hold_until, self.end
            )));
        }
        Ok(())
    }

    pub fn lr_at(&self, epoch: u32) -> f64 {
        if epoch <= self.hold_until {
            self.lr0
        } else if epoch >= self.end {
            self.lr1
        } else {
            let frac = f64::from(epoch - self.hold_until) / f64::from(self.end - self.hold_until);
            self.lr0 * (self.lr1 / self.lr0).powf(frac)
        }
    }
}

pub fn lr_at(schedule: &LrSchedule, epoch: u32) -> f64 {
    schedule.lr_at(epoch)
}
