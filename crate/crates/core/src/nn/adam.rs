use serde::{Deserialize, Serialize};

use super::params::ParamStore;
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 1e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Bias-corrected Adam moments for one parameter store.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl AdamState {
    pub fn new(store: &ParamStore, config: AdamConfig) -> Self {
        let zeros = || store.params.iter().map(|p| Tensor::zeros(p.value.rows, p.value.cols)).collect();
        AdamState { config, step: 0, m: zeros(), v: zeros() }
    }

    /// Applies one update from the gradients accumulated in `store`.
    pub fn update(&mut self, store: &mut ParamStore) -> Result<()> {
        if store.params.len() != self.m.len() {
            return Err(Error::Shape(format!(
                "optimizer tracks {} tensors, store {} has {}",
                self.m.len(),
                store.group,
                store.params.len()
            )));
        }
        self.step += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let c1 = 1.0 - beta1.powi(self.step as i32);
        let c2 = 1.0 - beta2.powi(self.step as i32);
        for ((p, m), v) in store.params.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            if p.grad.shape() != m.shape() {
                return Err(Error::Shape(format!("moment shape mismatch for {}", p.name)));
            }
            for i in 0..p.value.data.len() {
                let g = p.grad.data[i];
                m.data[i] = beta1 * m.data[i] + (1.0 - beta1) * g;
                v.data[i] = beta2 * v.data[i] + (1.0 - beta2) * g * g;
                let m_hat = m.data[i] / c1;
                let v_hat = v.data[i] / c2;
                p.value.data[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
