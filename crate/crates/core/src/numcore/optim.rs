//! AdamW with decoupled weight decay and global-norm gradient clipping.

use std::collections::BTreeMap;

use crate::error::{MtlError, Result};

use super::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OptimHyper {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
    /// Global gradient-norm ceiling; 0 disables clipping.
    pub clip_norm: f64,
}

impl Default for OptimHyper {
    fn default() -> Self {
        OptimHyper {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay: 0.01,
            clip_norm: 1.0,
        }
    }
}

impl OptimHyper {
    pub fn validate(&self) -> Result<()> {
        let checks = [
            ("learning_rate", self.learning_rate > 0.0),
            ("beta1", self.beta1 > 0.0 && self.beta1 < 1.0),
            ("beta2", self.beta2 > 0.0 && self.beta2 < 1.0),
            ("epsilon", self.epsilon > 0.0),
            ("weight_decay", self.weight_decay >= 0.0),
            ("clip_norm", self.clip_norm >= 0.0),
        ];
        for (name, ok) in checks {
            if !ok {
                return Err(MtlError::config(format!("optimizer field {name} out of bounds")));
            }
        }
        Ok(())
    }
}

/// First and second moments for one parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct Moments {
    pub m: Tensor,
    pub v: Tensor,
    pub t: u64,
}

/// Optimizer state keyed by parameter name.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AdamWState {
    pub slots: BTreeMap<String, Moments>,
}

impl AdamWState {
    pub fn new() -> Self {
        Self::default()
    }
}

/// Euclidean norm over all gradient tensors together.
pub fn global_norm(grads: &BTreeMap<String, Tensor>) -> f64 {
    grads.values().map(Tensor::sum_sq).sum::<f64>().sqrt()
}

/// Rescales gradients so their global norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut BTreeMap<String, Tensor>, max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if max_norm > 0.0 && norm > max_norm {
        let s = max_norm / norm;
        for g in grads.values_mut() {
            for x in g.data_mut() {
                *x *= s;
            }
        }
    }
    norm
}

/// One AdamW update over every parameter that has a gradient.
///
/// Gradients are clipped first when `hyper.clip_norm > 0`. The decay step
/// runs after the moment update and does not pass through the moments.
pub fn adamw_step(
    params: &mut BTreeMap<String, Tensor>,
    grads: &BTreeMap<String, Tensor>,
    state: &mut AdamWState,
    hyper: &OptimHyper,
) -> Result<()> {
    for (name, g) in grads {
        let p = params
            .get(name)
            .ok_or_else(|| MtlError::contract(format!("gradient for unknown parameter {name}")))?;
        p.expect_same_shape(g, "adamw_step")?;
    }
    let mut clipped;
    let grads = if hyper.clip_norm > 0.0 {
        clipped = grads.clone();
        clip_global_norm(&mut clipped, hyper.clip_norm);
        &clipped
    } else {
        grads
    };

    let lr = hyper.learning_rate;
    let decay = lr * hyper.weight_decay;
    for (name, g) in grads {
        let p = params.get_mut(name).expect("checked above");
        let slot = state.slots.entry(name.clone()).or_insert_with(|| Moments {
            m: Tensor::zeros(p.shape()),
            v: Tensor::zeros(p.shape()),
            t: 0,
        });
        p.expect_same_shape(&slot.m, "adamw_state")?;
        slot.t += 1;
        let bc1 = 1.0 - hyper.beta1.powi(slot.t as i32);
        let bc2 = 1.0 - hyper.beta2.powi(slot.t as i32);
        let (m, v) = (slot.m.data_mut(), slot.v.data_mut());
        for (((w, &gi), mi), vi) in p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.iter_mut())
            .zip(v.iter_mut())
        {
            *mi = hyper.beta1 * *mi + (1.0 - hyper.beta1) * gi;
            *vi = hyper.beta2 * *vi + (1.0 - hyper.beta2) * gi * gi;
            let m_hat = *mi / bc1;
            let v_hat = *vi / bc2;
            *w -= lr * m_hat / (v_hat.sqrt() + hyper.epsilon);
            *w -= decay * *w;
        }
    }
    Ok(())
}
