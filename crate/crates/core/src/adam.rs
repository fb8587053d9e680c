//! Bias-corrected Adam, shared by network training and attacks.

use serde::{Deserialize, Serialize};

use crate::error::{contract, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m1: Vec<f64>,
    pub m2: Vec<f64>,
    pub t: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    /// Fresh state with the usual constants (0.9, 0.999, 1e-8).
    pub fn new(len: usize, lr: f64) -> Self {
        Self {
            m1: vec![0.0; len],
            m2: vec![0.0; len],
            t: 0,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    /// One update in place; see [`adam_step`] for the functional form.
    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) -> Result<()> {
        if params.len() != grad.len()
            || params.len() != self.m1.len()
            || self.m2.len() != self.m1.len()
        {
            return Err(contract(format!(
                "adam: params {}, grad {}, moments {}/{}",
                params.len(),
                grad.len(),
                self.m1.len(),
                self.m2.len()
            )));
        }
        self.t += 1;
        let t = self.t as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for i in 0..params.len() {
            let g = grad[i];
            self.m1[i] = self.beta1 * self.m1[i] + (1.0 - self.beta1) * g;
            self.m2[i] = self.beta2 * self.m2[i] + (1.0 - self.beta2) * g * g;
            let mhat = self.m1[i] / c1;
            let vhat = self.m2[i] / c2;
            params[i] -= self.lr * mhat / (vhat.sqrt() + self.eps);
        }
        Ok(())
    }
}

/// Returns the updated parameters and state without touching the inputs.
pub fn adam_step(state: &AdamState, params: &[f64], grad: &[f64]) -> Result<(Vec<f64>, AdamState)> {
    let mut s = state.clone();
    let mut p = params.to_vec();
    s.step(&mut p, grad)?;
    Ok((p, s))
}
