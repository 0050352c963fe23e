//! Bias-corrected Adam over the flat parameter vector.

use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub config: AdamConfig,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl AdamState {
    pub fn new(config: AdamConfig, len: usize) -> Self {
        Self {
            config,
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn len(&self) -> usize {
        self.m.len()
    }

    pub fn is_empty(&self) -> bool {
        self.m.is_empty()
    }

    pub fn first_moment(&self) -> &[f64] {
        &self.m
    }

    pub fn second_moment(&self) -> &[f64] {
        &self.v
    }

    /// Extends the moments with zeros for newly appended parameters.
    pub fn grow(&mut self, new_len: usize) {
        if new_len > self.m.len() {
            self.m.resize(new_len, 0.0);
            self.v.resize(new_len, 0.0);
        }
    }

    /// Applies one Adam update to `params` in place and returns the applied step
    /// `theta(t+1) - theta(t)` per coordinate.
    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) -> Result<Vec<f64>> {
        check_len("gradient", grad.len(), params.len())?;
        check_len("optimizer state", self.m.len(), params.len())?;
        if let Some(i) = grad.iter().position(|g| !g.is_finite()) {
            return Err(Error::Numeric(format!("gradient entry {i} is {}", grad[i])));
        }
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.config;
        self.t += 1;
        let t = self.t as i32;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);
        let mut delta = vec![0.0; params.len()];
        for i in 0..params.len() {
            let g = grad[i];
            self.m[i] = beta1 * self.m[i] + (1.0 - beta1) * g;
            self.v[i] = beta2 * self.v[i] + (1.0 - beta2) * g * g;
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            let before = params[i];
            params[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            delta[i] = params[i] - before;
        }
        Ok(delta)
    }
}
