//! AdamW with bias correction and decoupled weight decay; decay is applied
//! only to parameter tensors flagged for it (LayerNorm gains and the
//! embedding/unembedding tables are exempt).

use ndarray::Zip;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::Arr;
use crate::params::ParamSet;

fn d_beta1() -> f64 {
    0.9
}
fn d_beta2() -> f64 {
    0.95
}
fn d_eps() -> f64 {
    1e-8
}
fn d_weight_decay() -> f64 {
    1e-4
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct AdamConfig {
    #[serde(default = "d_beta1")]
    pub beta1: f64,
    #[serde(default = "d_beta2")]
    pub beta2: f64,
    #[serde(default = "d_eps")]
    pub eps: f64,
    #[serde(default = "d_weight_decay")]
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            weight_decay: 1e-4,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::config(format!("{name} must be in [0,1), got {b}")));
            }
        }
        if self.eps <= 0.0 || self.eps.is_nan() {
            return Err(Error::config(format!("eps must be positive, got {}", self.eps)));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::config(format!(
                "weight decay must be non-negative, got {}",
                self.weight_decay
            )));
        }
        Ok(())
    }
}

/// First/second moment estimates, one pair per parameter tensor in
/// ParamSet order, plus the shared step counter.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub m: Vec<Arr>,
    pub v: Vec<Arr>,
    pub t: u64,
}

impl AdamState {
    pub fn new(params: &ParamSet) -> Self {
        let zeros: Vec<Arr> = params.iter().map(|e| Arr::zeros(e.value.raw_dim())).collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }
}

/// One optimizer step. `grads` is aligned with the ParamSet order. The
/// update is `w -= lr * m_hat / (sqrt(v_hat) + eps) + lr * wd * w_old`,
/// with the decay term computed from the pre-update weight and skipped for
/// tensors not flagged for decay.
pub fn adamw_step(
    params: &mut ParamSet,
    grads: &[Arr],
    state: &mut AdamState,
    lr: f64,
    cfg: &AdamConfig,
) -> Result<()> {
    cfg.validate()?;
    if grads.len() != params.len() || state.m.len() != params.len() {
        return Err(Error::shape(format!(
            "{} gradients and {} moment pairs for {} parameters",
            grads.len(),
            state.m.len(),
            params.len()
        )));
    }
    state.t += 1;
    let bc1 = 1.0 - cfg.beta1.powi(state.t as i32);
    let bc2 = 1.0 - cfg.beta2.powi(state.t as i32);
    #[allow(clippy::needless_range_loop)]
    for i in 0..params.len() {
        let entry = params.entry_mut(i);
        let g = &grads[i];
        if g.shape() != entry.value.shape() {
            return Err(Error::shape(format!(
                "gradient shape {:?} does not match parameter {} shape {:?}",
                g.shape(),
                entry.name,
                entry.value.shape()
            )));
        }
        let decay = if entry.decay { cfg.weight_decay } else { 0.0 };
        Zip::from(&mut entry.value)
            .and(&mut state.m[i])
            .and(&mut state.v[i])
            .and(g)
            .for_each(|w, m, v, &g| {
                *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
                *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                *w -= lr * m_hat / (v_hat.sqrt() + cfg.eps) + lr * decay * *w;
            });
    }
    Ok(())
}
