//! AdamW with decoupled weight decay and bias correction.

use serde::{Deserialize, Serialize};

use crate::error::{LctrError, Result};
use crate::tensor::ParamStore;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.99,
            eps: 1e-8,
            weight_decay: 5e-4,
        }
    }
}

#[derive(Clone, Debug)]
pub struct AdamW {
    pub config: AdamWConfig,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
    step: u64,
}

impl AdamW {
    pub fn new(config: AdamWConfig) -> Self {
        Self {
            config,
            first: Vec::new(),
            second: Vec::new(),
            step: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One update of every parameter in `params` from its accumulated grad.
    ///
    /// Decay is applied to the parameter before the moment update:
    /// `p ← p − lr·wd·p − lr·m̂/(√v̂ + ε)`.
    pub fn step(&mut self, params: &mut ParamStore) -> Result<()> {
        if let Some(p) = params.iter().find(|p| p.tensor.grad.is_none()) {
            return Err(LctrError::Usage(format!(
                "parameter {} has no gradient; run backward first",
                p.name
            )));
        }
        if self.first.is_empty() {
            self.first = params.iter().map(|p| vec![0.0; p.numel()]).collect();
            self.second = self.first.clone();
        }
        if self.first.len() != params.len() {
            return Err(LctrError::Usage(
                "optimizer state does not match parameter list".into(),
            ));
        }
        self.step += 1;
        let AdamWConfig {
            lr,
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for (idx, p) in params.params_mut().iter_mut().enumerate() {
            let grad = p.tensor.grad.clone().expect("checked above");
            let (m, v) = (&mut self.first[idx], &mut self.second[idx]);
            for (k, w) in p.tensor.data_mut().iter_mut().enumerate() {
                let g = grad[k];
                *w -= lr * weight_decay * *w;
                m[k] = beta1 * m[k] + (1.0 - beta1) * g;
                v[k] = beta2 * v[k] + (1.0 - beta2) * g * g;
                let mhat = m[k] / bc1;
                let vhat = v[k] / bc2;
                *w -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn scalar_store(value: f64, grad: f64) -> ParamStore {
        let mut store = ParamStore::new();
        let id = store.add("p", Tensor::scalar(value)).unwrap();
        store.get_mut(id).tensor.accumulate_grad(&[grad]);
        store
    }

    #[test]
    fn zero_grad_zero_decay_is_noop() {
        let mut store = scalar_store(0.7, 0.0);
        let mut opt = AdamW::new(AdamWConfig {
            weight_decay: 0.0,
            ..Default::default()
        });
        opt.step(&mut store).unwrap();
        assert_eq!(store.params()[0].tensor.data()[0], 0.7);
        assert_eq!(opt.steps(), 1);
    }

    #[test]
    fn single_step_matches_hand_computation() {
        let mut store = scalar_store(1.0, 1.0);
        let mut opt = AdamW::new(AdamWConfig {
            lr: 0.1,
            weight_decay: 0.0,
            ..Default::default()
        });
        opt.step(&mut store).unwrap();
        // m = 0.1, v = 0.01 (beta2 = 0.99), m̂ = 1, v̂ = 1.
        let expected = 1.0 - 0.1 * 1.0 / (1.0 + 1e-8);
        let got = store.params()[0].tensor.data()[0];
        assert!(got < 1.0);
        assert!((got - expected).abs() < 1e-15, "{got} vs {expected}");
    }

    #[test]
    fn decoupled_decay_in_isolation() {
        let mut store = scalar_store(2.0, 0.0);
        let mut opt = AdamW::new(AdamWConfig {
            lr: 0.1,
            weight_decay: 0.5,
            ..Default::default()
        });
        opt.step(&mut store).unwrap();
        assert!((store.params()[0].tensor.data()[0] - 2.0 * 0.95).abs() < 1e-15);
    }

    #[test]
    fn missing_grad_is_usage_error() {
        let mut store = ParamStore::new();
        store.add("p", Tensor::scalar(1.0)).unwrap();
        let mut opt = AdamW::new(AdamWConfig::default());
        assert!(matches!(opt.step(&mut store), Err(LctrError::Usage(_))));
    }
}
