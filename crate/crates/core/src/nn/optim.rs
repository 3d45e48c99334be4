use super::{Mlp, NnError};
use serde::{Deserialize, Serialize};

/// Adam with bias correction.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    first: Vec<f64>,
    second: Vec<f64>,
    step: u64,
}

impl OptimizerState {
    pub fn new(learning_rate: f64, param_count: usize) -> Self {
        Self {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            first: vec![0.0; param_count],
            second: vec![0.0; param_count],
            step: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn first_moment(&self) -> &[f64] {
        &self.first
    }

    /// Clips `grads` to global norm `max_grad_norm` and applies one update.
    /// Returns the pre-clip norm. A non-finite gradient leaves everything untouched.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64], max_grad_norm: f64) -> Result<f64, NnError> {
        if params.len() != self.first.len() || grads.len() != params.len() {
            return Err(NnError::DimensionMismatch {
                expected: self.first.len(),
                got: if params.len() != self.first.len() {
                    params.len()
                } else {
                    grads.len()
                },
            });
        }
        if grads.iter().any(|g| !g.is_finite()) {
            return Err(NnError::NonFinite);
        }
        let norm = grads.iter().map(|g| g * g).sum::<f64>().sqrt();
        let scale = clip_norm(norm, max_grad_norm);
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for i in 0..params.len() {
            let g = grads[i] * scale;
            self.first[i] = self.beta1 * self.first[i] + (1.0 - self.beta1) * g;
            self.second[i] = self.beta2 * self.second[i] + (1.0 - self.beta2) * g * g;
            let m_hat = self.first[i] / c1;
            let v_hat = self.second[i] / c2;
            params[i] -= self.learning_rate * m_hat / (v_hat.sqrt() + self.epsilon);
        }
        Ok(norm)
    }
}

/// Multiplier that brings a gradient of norm `norm` within `max_norm`.
/// Non-positive or infinite `max_norm` disables clipping.
pub fn clip_norm(norm: f64, max_norm: f64) -> f64 {
    if max_norm > 0.0 && max_norm.is_finite() && norm > max_norm {
        max_norm / norm
    } else {
        1.0
    }
}

/// `target <- (1 - tau) target + tau online`, elementwise.
pub fn soft_update(target: &mut Mlp, online: &Mlp, tau: f64) -> Result<(), NnError> {
    if !(tau > 0.0 && tau <= 1.0) {
        return Err(NnError::InvalidTau(tau));
    }
    if target.sizes() != online.sizes() {
        return Err(NnError::DimensionMismatch {
            expected: target.param_count(),
            got: online.param_count(),
        });
    }
    for (t, &o) in target.params_mut().iter_mut().zip(online.params()) {
        *t = (1.0 - tau) * *t + tau * o;
    }
    Ok(())
}
