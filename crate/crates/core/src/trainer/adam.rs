//! Bias-corrected Adam with per-parameter step counts.

use indexmap::IndexMap;
use thiserror::Error;

use crate::params::ParamStore;
use crate::tensor::{Precision, Tensor};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum OptimError {
    #[error("gradient for {name} has shape {got:?}, parameter has {expected:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("non-finite gradient for {0}")]
    NonFiniteGrad(String),
    #[error("gradient for unknown parameter {0}")]
    UnknownParameter(String),
    #[error("invalid optimizer setting {what} = {value}")]
    InvalidSetting { what: &'static str, value: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        AdamConfig {
            lr,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), OptimError> {
        let bad = |what, value| Err(OptimError::InvalidSetting { what, value });
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return bad("lr", self.lr);
        }
        if !(0.0..1.0).contains(&self.beta1) {
            return bad("beta1", self.beta1);
        }
        if !(0.0..1.0).contains(&self.beta2) {
            return bad("beta2", self.beta2);
        }
        if !(self.eps.is_finite() && self.eps > 0.0) {
            return bad("eps", self.eps);
        }
        Ok(())
    }
}

/// Moment buffers for one parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct Moments {
    pub m: Tensor,
    pub v: Tensor,
    /// Number of updates this parameter has received.
    pub t: u64,
}

/// Optimizer state keyed by parameter name.
///
/// A parameter's moments are created on its first gradient, and its step
/// count only advances when it receives one, so heads that sit out some
/// iterations are corrected with their own count.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    config: AdamConfig,
    slots: IndexMap<String, Moments>,
}

impl AdamState {
    pub fn new(config: AdamConfig) -> Self {
        AdamState {
            config,
            slots: IndexMap::new(),
        }
    }

    pub fn config(&self) -> &AdamConfig {
        &self.config
    }

    pub fn moments(&self, name: &str) -> Option<&Moments> {
        self.slots.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Moments)> {
        self.slots.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    /// Restores a slot, e.g. from a checkpoint.
    pub fn insert(&mut self, name: impl Into<String>, moments: Moments) {
        self.slots.insert(name.into(), moments);
    }

    /// Applies one update to the parameters of `params` named in `grads`.
    /// State entries are keyed `{prefix}{name}` so several stores can share
    /// one optimizer.
    ///
    /// Every gradient is checked before any parameter changes.
    pub fn step_group(
        &mut self,
        prefix: &str,
        params: &mut ParamStore,
        grads: &[(String, Tensor)],
        precision: Precision,
    ) -> Result<(), OptimError> {
        for (name, g) in grads {
            let p = params
                .get(name)
                .ok_or_else(|| OptimError::UnknownParameter(name.clone()))?;
            if p.shape() != g.shape() {
                return Err(OptimError::ShapeMismatch {
                    name: name.clone(),
                    expected: p.shape().to_vec(),
                    got: g.shape().to_vec(),
                });
            }
            if g.data().iter().any(|v| !v.is_finite()) {
                return Err(OptimError::NonFiniteGrad(name.clone()));
            }
        }
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.config;
        for (name, g) in grads {
            let p = params.get_mut(name).expect("checked above");
            let slot = self
                .slots
                .entry(format!("{prefix}{name}"))
                .or_insert_with(|| Moments {
                    m: Tensor::zeros(p.shape().to_vec()),
                    v: Tensor::zeros(p.shape().to_vec()),
                    t: 0,
                });
            slot.t += 1;
            let bc1 = 1.0 - beta1.powi(slot.t as i32);
            let bc2 = 1.0 - beta2.powi(slot.t as i32);
            let m = slot.m.data_mut();
            let v = slot.v.data_mut();
            let w = p.data_mut();
            for i in 0..w.len() {
                let gi = g.data()[i];
                m[i] = precision.round(beta1 * m[i] + (1.0 - beta1) * gi);
                v[i] = precision.round(beta2 * v[i] + (1.0 - beta2) * gi * gi);
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                w[i] = precision.round(w[i] - lr * m_hat / (v_hat.sqrt() + eps));
            }
        }
        Ok(())
    }
}

/// One Adam update with state keys equal to parameter names.
pub fn adam_step(
    params: &mut ParamStore,
    grads: &[(String, Tensor)],
    st: &mut AdamState,
    precision: Precision,
) -> Result<(), OptimError> {
    st.step_group("", params, grads, precision)
}

/// Global L2 norm over a set of gradients.
pub fn global_norm<'a>(grads: impl IntoIterator<Item = &'a Tensor>) -> f64 {
    grads
        .into_iter()
        .flat_map(|t| t.data().iter())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt()
}

/// Rescales all gradients so their global norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [&mut Vec<(String, Tensor)>], max_norm: f64) -> f64 {
    let norm = global_norm(grads.iter().flat_map(|g| g.iter().map(|(_, t)| t)));
    if norm > max_norm && norm.is_finite() {
        let s = max_norm / norm;
        for group in grads.iter_mut() {
            for (_, t) in group.iter_mut() {
                for v in t.data_mut() {
                    *v *= s;
                }
            }
        }
    }
    norm
}
