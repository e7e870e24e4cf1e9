//! Adaptive-moment optimizer with decoupled weight decay, linear warmup and
//! global-norm clipping.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelParams, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub warmup_steps: u64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { learning_rate: 3e-4, warmup_steps: 100, weight_decay: 0.0, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

impl AdamConfig {
    /// `base · min(step / warmup, 1)` for 1-based `step`.
    pub fn lr_at(&self, step: u64) -> f64 {
        if self.warmup_steps == 0 {
            self.learning_rate
        } else {
            self.learning_rate * (step as f64 / self.warmup_steps as f64).min(1.0)
        }
    }
}

/// First and second moments for every tensor that carries a gradient,
/// keyed by canonical tensor name.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub t: u64,
    pub names: Vec<String>,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl AdamState {
    /// Zero moments shaped like the non-empty tensors of `grads`.
    pub fn new(grads: &ModelParams) -> Self {
        let mut s = AdamState { t: 0, names: Vec::new(), m: Vec::new(), v: Vec::new() };
        for (name, g) in grads.tensors() {
            if !g.is_empty() {
                s.names.push(name);
                s.m.push(g.zeros_like());
                s.v.push(g.zeros_like());
            }
        }
        s
    }

    /// `adam.t`, `adam.m.<name>` and `adam.v.<name>` tensors for checkpoints.
    pub fn to_tensors(&self) -> Vec<(String, Tensor)> {
        let mut out = vec![("adam.t".to_string(), Tensor::from_vec(1, 1, vec![self.t as f64]))];
        for (i, n) in self.names.iter().enumerate() {
            out.push((format!("adam.m.{n}"), self.m[i].clone()));
            out.push((format!("adam.v.{n}"), self.v[i].clone()));
        }
        out
    }

    pub fn from_tensors(tensors: Vec<(String, Tensor)>) -> Result<Self> {
        let mut s = AdamState { t: 0, names: Vec::new(), m: Vec::new(), v: Vec::new() };
        for (name, t) in tensors {
            if name == "adam.t" {
                s.t = t.data[0] as u64;
            } else if let Some(n) = name.strip_prefix("adam.m.") {
                s.names.push(n.to_string());
                s.m.push(t);
            } else if let Some(n) = name.strip_prefix("adam.v.") {
                if s.names.last().map(String::as_str) != Some(n) {
                    return Err(Error::Checkpoint(format!("optimizer tensor {name} out of order")));
                }
                s.v.push(t);
            } else {
                return Err(Error::Checkpoint(format!("unexpected optimizer tensor {name}")));
            }
        }
        if s.m.len() != s.v.len() {
            return Err(Error::Checkpoint("optimizer moments incomplete".into()));
        }
        Ok(s)
    }
}

/// Scales `grads` in place so their global norm is at most `max_norm`;
/// returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut ModelParams, max_norm: f64) -> f64 {
    let norm = crate::model::grad_norm(grads);
    if max_norm > 0.0 && norm > max_norm {
        let s = max_norm / norm;
        for (_, t) in grads.tensors_mut() {
            t.scale(s);
        }
    }
    norm
}

/// One update at 1-based `step`. Only tensors with a non-empty gradient
/// change; decay is applied as `p ← p − lr·wd·p` before the moment update.
pub fn optimizer_step(params: &mut ModelParams, grads: &ModelParams, state: &mut AdamState, cfg: &AdamConfig, step: u64) -> Result<()> {
    let lr = cfg.lr_at(step);
    state.t += 1;
    let bc1 = 1.0 - cfg.beta1.powi(state.t as i32);
    let bc2 = 1.0 - cfg.beta2.powi(state.t as i32);
    let mut slot = 0;
    for ((name, p), (_, g)) in params.tensors_mut().into_iter().zip(grads.tensors()) {
        if g.is_empty() {
            continue;
        }
        if slot >= state.names.len() || state.names[slot] != name {
            return Err(Error::Checkpoint(format!("optimizer state has no slot for {name}")));
        }
        if p.shape() != g.shape() || state.m[slot].shape() != g.shape() {
            return Err(Error::ShapeMismatch { name, expected: p.shape(), got: g.shape() });
        }
        let (m, v) = (&mut state.m[slot].data, &mut state.v[slot].data);
        for i in 0..p.data.len() {
            let gi = g.data[i];
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * gi;
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * gi * gi;
            let mhat = m[i] / bc1;
            let vhat = v[i] / bc2;
            p.data[i] -= lr * cfg.weight_decay * p.data[i];
            p.data[i] -= lr * mhat / (vhat.sqrt() + cfg.eps);
        }
        slot += 1;
    }
    if slot != state.names.len() {
        return Err(Error::Checkpoint("gradient structure does not match optimizer state".into()));
    }
    Ok(())
}
