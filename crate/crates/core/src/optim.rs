//! Adam with bias correction.

use serde::{Deserialize, Serialize};

use crate::error::{config_err, Error, Result};
use crate::params::ParamStore;
use crate::tensor::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(config_err!("adam lr must be positive, got {}", self.lr));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(config_err!("adam {name} must be in [0, 1), got {b}"));
            }
        }
        if !(self.eps > 0.0) {
            return Err(config_err!("adam eps must be positive, got {}", self.eps));
        }
        Ok(())
    }
}

/// Moment buffers, indexed like the parameters of the store they were
/// created for. Buffers (non-trainable entries) keep empty moments.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub step_count: u64,
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
    pub hyper: AdamConfig,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(store: &ParamStore<T>, hyper: AdamConfig) -> Result<Self> {
        hyper.validate()?;
        let sizes: Vec<usize> = store
            .iter()
            .map(|(_, p)| if p.is_trainable() { p.value.numel() } else { 0 })
            .collect();
        Ok(AdamState {
            step_count: 0,
            m: sizes.iter().map(|&n| vec![T::zero(); n]).collect(),
            v: sizes.iter().map(|&n| vec![T::zero(); n]).collect(),
            hyper,
        })
    }
}

/// One Adam update of every trainable parameter. Gradients are read, not
/// cleared.
pub fn adam_step<T: Scalar>(store: &mut ParamStore<T>, state: &mut AdamState<T>) -> Result<()> {
    if state.m.len() != store.len() {
        return Err(Error::Usage(format!(
            "optimizer state tracks {} parameters, store has {}",
            state.m.len(),
            store.len()
        )));
    }
    if let Some((_, p)) = store.iter().find(|(_, p)| p.is_trainable() && p.grad.is_none()) {
        return Err(Error::Usage(format!("parameter '{}' has no gradient", p.name)));
    }
    state.step_count += 1;
    let h = state.hyper;
    let t = state.step_count as i32;
    let bc1 = 1.0 - h.beta1.powi(t);
    let bc2 = 1.0 - h.beta2.powi(t);
    let (b1, b2) = (T::from_f64_lossy(h.beta1), T::from_f64_lossy(h.beta2));
    let (one_b1, one_b2) = (T::from_f64_lossy(1.0 - h.beta1), T::from_f64_lossy(1.0 - h.beta2));
    let step = T::from_f64_lossy(h.lr / bc1);
    let inv_bc2 = T::from_f64_lossy(1.0 / bc2);
    let eps = T::from_f64_lossy(h.eps);

    for (id, p) in store.iter_mut() {
        if !p.is_trainable() {
            continue;
        }
        let g = p.grad.as_ref().expect("checked above").data();
        let (m, v) = (&mut state.m[id.index()], &mut state.v[id.index()]);
        if m.len() != g.len() {
            return Err(Error::Usage(format!(
                "optimizer moment for '{}' has {} entries, parameter has {}",
                p.name,
                m.len(),
                g.len()
            )));
        }
        for (((w, &gi), mi), vi) in p.value.data_mut().iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
            *mi = b1 * *mi + one_b1 * gi;
            *vi = b2 * *vi + one_b2 * gi * gi;
            *w -= step * *mi / ((*vi * inv_bc2).sqrt() + eps);
        }
    }
    Ok(())
}
