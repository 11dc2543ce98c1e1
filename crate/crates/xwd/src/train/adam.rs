//! Adaptive moment estimation with bias correction.
//!
//! Moment buffers are keyed by parameter name so an optimizer instance stays
//! aligned with its model across steps regardless of visit order, and the
//! step count is shared across all parameters (one `t` per optimizer step).

use std::collections::BTreeMap;

use crate::model::EncoderState;

/// First/second-moment optimizer with the conventional coefficients
/// β₁ = 0.9, β₂ = 0.999, ε = 1e-8.
#[derive(Debug, Clone)]
pub struct Adam {
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: u64,
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
}

impl Default for Adam {
    fn default() -> Self {
        Self::new()
    }
}

impl Adam {
    pub fn new() -> Self {
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    /// Applies one bias-corrected update from the gradients currently
    /// accumulated in `state`, at learning rate `lr`.
    pub fn step(&mut self, state: &mut EncoderState, lr: f64) {
        self.t += 1;
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
        let bc1 = 1.0 - b1.powi(self.t as i32);
        let bc2 = 1.0 - b2.powi(self.t as i32);
        let (ms, vs) = (&mut self.m, &mut self.v);
        state.visit_params_mut(&mut |name, p| {
            let m = ms.entry(name.clone()).or_insert_with(|| vec![0.0; p.len()]);
            let v = vs.entry(name).or_insert_with(|| vec![0.0; p.len()]);
            debug_assert_eq!(m.len(), p.len());
            for i in 0..p.len() {
                let g = p.grad[i];
                m[i] = b1 * m[i] + (1.0 - b1) * g;
                v[i] = b2 * v[i] + (1.0 - b2) * g * g;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                p.val[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        });
    }
}
