//! Adam with bias correction, step-decay schedule and global-norm clipping.

use std::collections::BTreeMap;

use meshcontact_tensor::{Gradients, ParamStore, Tensor};

use crate::config::TrainConfig;
use crate::error::{Error, Result};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    step: u64,
    m: BTreeMap<String, Tensor>,
    v: BTreeMap<String, Tensor>,
}

impl Default for Adam {
    fn default() -> Self {
        Self::new()
    }
}

impl Adam {
    pub fn new() -> Self {
        Self {
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    /// Restores a saved state; moment tables must cover the same names.
    pub fn from_parts(step: u64, m: BTreeMap<String, Tensor>, v: BTreeMap<String, Tensor>) -> Result<Self> {
        if !m.keys().eq(v.keys()) || m.iter().any(|(k, t)| v[k].shape() != t.shape()) {
            return Err(Error::Load("optimizer moment tables disagree".into()));
        }
        Ok(Self { step, m, v })
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn first_moments(&self) -> &BTreeMap<String, Tensor> {
        &self.m
    }

    pub fn second_moments(&self) -> &BTreeMap<String, Tensor> {
        &self.v
    }

    /// One bias-corrected update of every parameter in `params`.
    pub fn step(&mut self, params: &mut ParamStore, grads: &Gradients, lr: f64) -> Result<()> {
        for (name, p) in params.iter() {
            match grads.get(name) {
                None => return Err(Error::Contract(format!("no gradient for parameter `{name}`"))),
                Some(g) if g.shape() != p.shape() => {
                    return Err(Error::Contract(format!(
                        "gradient for `{name}` has shape {:?}, parameter has {:?}",
                        g.shape(),
                        p.shape()
                    )))
                }
                Some(_) => {}
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - BETA1.powi(t);
        let c2 = 1.0 - BETA2.powi(t);
        for (name, p) in params.iter_mut() {
            let g = grads.get(name).expect("checked above").data();
            let m = self.m.entry(name.clone()).or_insert_with(|| Tensor::zeros(p.shape().to_vec()));
            let v = self.v.entry(name.clone()).or_insert_with(|| Tensor::zeros(p.shape().to_vec()));
            for (((pi, mi), vi), &gi) in p.data_mut().iter_mut().zip(m.data_mut()).zip(v.data_mut()).zip(g) {
                *mi = BETA1 * *mi + (1.0 - BETA1) * gi;
                *vi = BETA2 * *vi + (1.0 - BETA2) * gi * gi;
                let m_hat = *mi / c1;
                let v_hat = *vi / c2;
                *pi -= lr * m_hat / (v_hat.sqrt() + EPSILON);
            }
        }
        Ok(())
    }
}

/// `lr₀ · factor^⌊epoch / every⌋` for a 0-based epoch.
pub fn lr_at(epoch: usize, cfg: &TrainConfig) -> f64 {
    let decays = if cfg.decay_every == 0 { 0 } else { epoch / cfg.decay_every };
    cfg.lr * cfg.decay_factor.powi(decays as i32)
}

/// Rescales `grads` so their global norm is at most `max_norm`; returns the
/// norm before clipping. A non-positive `max_norm` leaves them untouched.
pub fn clip_global_norm(grads: &mut Gradients, max_norm: f64) -> f64 {
    let norm = grads.global_norm();
    if max_norm > 0.0 && norm > max_norm {
        grads.scale(max_norm / norm);
    }
    norm
}
