use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::ModelState;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// `base * (1 - iter / max_iter)^0.9`, zero from `max_iter` on.
pub fn poly_lr(base: f64, iter: u64, max_iter: u64) -> f64 {
    if max_iter == 0 || iter >= max_iter {
        return 0.0;
    }
    base * (1.0 - iter as f64 / max_iter as f64).powf(0.9)
}

/// Adam with bias correction and a poly-decayed step size.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub max_iter: u64,
    #[serde(skip)]
    pub(crate) m: BTreeMap<String, Vec<f64>>,
    #[serde(skip)]
    pub(crate) v: BTreeMap<String, Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64, max_iter: u64) -> Self {
        Adam { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, max_iter, m: BTreeMap::new(), v: BTreeMap::new() }
    }

    pub fn lr_at(&self, iter: u64) -> f64 {
        poly_lr(self.lr, iter, self.max_iter)
    }

    /// First and second moment buffers for `name`, if any step touched it.
    pub fn moments(&self, name: &str) -> Option<(&[f64], &[f64])> {
        Some((self.m.get(name)?.as_slice(), self.v.get(name)?.as_slice()))
    }

    pub(crate) fn set_moments(&mut self, name: String, m: Vec<f64>, v: Vec<f64>) {
        self.m.insert(name.clone(), m);
        self.v.insert(name, v);
    }

    /// Applies one update from the accumulated gradients and advances
    /// `state.step`. Parameters without a gradient see a zero gradient.
    /// Returns the learning rate used.
    pub fn step(&mut self, state: &mut ModelState) -> Result<f64> {
        let lr = self.lr_at(state.step);
        let t = (state.step + 1) as i32;
        let (c1, c2) = (1.0 - self.beta1.powi(t), 1.0 - self.beta2.powi(t));
        let mut updated = BTreeMap::new();
        for (name, p) in &state.params {
            let grad = p.grad().unwrap_or_else(|| vec![0.0; p.numel()]);
            if let Some(i) = grad.iter().position(|g| !g.is_finite()) {
                return Err(Error::NonFinite(format!("gradient of {name}[{i}] at step {}", state.step)));
            }
            let m = self.m.entry(name.clone()).or_insert_with(|| vec![0.0; p.numel()]);
            let v = self.v.entry(name.clone()).or_insert_with(|| vec![0.0; p.numel()]);
            let mut data = p.data().to_vec();
            for i in 0..data.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * grad[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
                data[i] -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + self.eps);
            }
            updated.insert(name.clone(), Tensor::param(p.shape(), data)?);
        }
        state.params = updated;
        state.step += 1;
        Ok(lr)
    }
}
