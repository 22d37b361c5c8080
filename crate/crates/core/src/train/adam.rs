use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::vnet::Param;
use crate::nn::Real;

/// Adam hyperparameters other than the learning rate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub betas: (f64, f64),
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            betas: (0.9, 0.999),
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        let (b1, b2) = self.betas;
        if !(0.0..1.0).contains(&b1) || !(0.0..1.0).contains(&b2) {
            return Err(Error::invalid(format!("Adam betas must lie in [0, 1), got ({b1}, {b2})")));
        }
        if !(self.eps > 0.0) || !self.eps.is_finite() {
            return Err(Error::invalid(format!("Adam eps must be positive, got {}", self.eps)));
        }
        Ok(())
    }
}

/// First and second moments per parameter array plus the step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
    pub step: u64,
}

impl<T: Real> AdamState<T> {
    pub fn new(params: &[Param<T>]) -> Self {
        Self::with_sizes(params.iter().map(|p| p.value.len()))
    }

    pub fn with_sizes(sizes: impl IntoIterator<Item = usize>) -> Self {
        let (m, v) = sizes.into_iter().map(|n| (vec![T::zero(); n], vec![T::zero(); n])).unzip();
        Self { m, v, step: 0 }
    }
}

/// One bias-corrected Adam update. Gradients are checked for finiteness
/// before anything is modified.
pub fn adam_step<T: Real>(
    params: &mut [Param<T>],
    grads: &[Vec<T>],
    state: &mut AdamState<T>,
    cfg: &AdamConfig,
    lr: f64,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::shape(format!(
            "Adam got {} parameters, {} gradients and {} moment arrays",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for ((p, g), m) in params.iter().zip(grads).zip(&state.m) {
        if p.value.len() != g.len() || g.len() != m.len() {
            return Err(Error::shape(format!(
                "{}: parameter has {} entries, gradient {}, moments {}",
                p.name,
                p.value.len(),
                g.len(),
                m.len()
            )));
        }
        if let Some(i) = g.iter().position(|v| !v.is_finite()) {
            return Err(Error::TrainingDivergence(format!(
                "non-finite gradient in parameter {} at entry {i}",
                p.name
            )));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = cfg.betas;
    let bc1 = T::of(1.0 - b1.powi(t));
    let bc2 = T::of(1.0 - b2.powi(t));
    let (b1, b2, eps, lr) = (T::of(b1), T::of(b2), T::of(cfg.eps), T::of(lr));
    let one = T::one();
    for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut state.m).zip(&mut state.v) {
        for (((theta, &g), m), v) in p.value.data_mut().iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
            *m = b1 * *m + (one - b1) * g;
            *v = b2 * *v + (one - b2) * g * g;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            *theta = *theta - lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}
