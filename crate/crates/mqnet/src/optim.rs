//! AdamW: adaptive moments with decoupled weight decay.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::nn::ParamStore;
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
pub struct OptimConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            lr: 5e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

pub struct AdamW<S: Scalar> {
    pub cfg: OptimConfig,
    pub step: u64,
    m: Vec<Tensor<S>>,
    v: Vec<Tensor<S>>,
}

impl<S: Scalar> AdamW<S> {
    pub fn new(cfg: OptimConfig, store: &ParamStore<S>) -> Self {
        let m = (0..store.len())
            .map(|i| Tensor::zeros(store.get(i).shape()))
            .collect();
        let v = (0..store.len())
            .map(|i| Tensor::zeros(store.get(i).shape()))
            .collect();
        AdamW {
            cfg,
            step: 0,
            m,
            v,
        }
    }

    /// One update over the parameters that received gradients.
    /// Parameters outside the gradient map are left untouched.
    pub fn apply(&mut self, store: &mut ParamStore<S>, grads: &BTreeMap<usize, Tensor<S>>) -> Result<()> {
        self.step += 1;
        let lr = S::from_f64(self.cfg.lr);
        let b1 = S::from_f64(self.cfg.beta1);
        let b2 = S::from_f64(self.cfg.beta2);
        let eps = S::from_f64(self.cfg.eps);
        let wd = S::from_f64(self.cfg.weight_decay);
        let one = S::one();
        let bc1 = S::from_f64(1.0 - self.cfg.beta1.powi(self.step as i32));
        let bc2 = S::from_f64(1.0 - self.cfg.beta2.powi(self.step as i32));
        for (&id, g) in grads {
            let m = self.m[id].data_mut();
            let v = self.v[id].data_mut();
            let p = store.get_mut(id).data_mut();
            for i in 0..p.len() {
                let gi = g.data()[i];
                m[i] = b1 * m[i] + (one - b1) * gi;
                v[i] = b2 * v[i] + (one - b2) * gi * gi;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                p[i] = p[i] - lr * (mhat / (vhat.sqrt() + eps)) - lr * wd * p[i];
            }
        }
        Ok(())
    }

    /// Moment tensors and step counter for checkpointing.
    pub fn state(&self) -> (u64, &[Tensor<S>], &[Tensor<S>]) {
        (self.step, &self.m, &self.v)
    }

    pub fn restore(&mut self, step: u64, m: Vec<Tensor<S>>, v: Vec<Tensor<S>>) {
        self.step = step;
        self.m = m;
        self.v = v;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_about_lr() {
        let mut store = ParamStore::<f64>::new();
        let id = store.alloc("w", Tensor::zeros(&[2]));
        let cfg = OptimConfig {
            lr: 0.1,
            weight_decay: 0.0,
            ..OptimConfig::default()
        };
        let mut opt = AdamW::new(cfg, &store);
        let mut grads = BTreeMap::new();
        grads.insert(id, Tensor::from_f64s(&[2], &[1.0, -2.0]).unwrap());
        opt.apply(&mut store, &grads).unwrap();
        // bias-corrected first step is lr·g/(|g| + eps') ≈ ±lr
        let p = store.get(id).data();
        assert!((p[0] + 0.1).abs() < 1e-6, "{p:?}");
        assert!((p[1] - 0.1).abs() < 1e-6, "{p:?}");
    }

    #[test]
    fn tiny_gradients_leave_weight_decay_only() {
        let mut store = ParamStore::<f64>::new();
        let id = store.alloc("w", Tensor::from_f64s(&[1], &[0.5]).unwrap());
        let cfg = OptimConfig {
            lr: 1e-3,
            weight_decay: 0.01,
            ..OptimConfig::default()
        };
        let mut opt = AdamW::new(cfg, &store);
        let mut grads = BTreeMap::new();
        grads.insert(id, Tensor::from_f64s(&[1], &[1e-40]).unwrap());
        opt.apply(&mut store, &grads).unwrap();
        let expected = 0.5 - 1e-3 * 0.01 * 0.5;
        let got = store.get(id).data()[0];
        assert!((got - expected).abs() < 1e-12, "{got} vs {expected}");
    }

    #[test]
    fn untouched_params_stay_put() {
        let mut store = ParamStore::<f64>::new();
        let a = store.alloc("a", Tensor::from_f64s(&[1], &[1.0]).unwrap());
        let b = store.alloc("b", Tensor::from_f64s(&[1], &[2.0]).unwrap());
        let mut opt = AdamW::new(OptimConfig::default(), &store);
        let mut grads = BTreeMap::new();
        grads.insert(a, Tensor::from_f64s(&[1], &[0.5]).unwrap());
        opt.apply(&mut store, &grads).unwrap();
        assert_eq!(store.get(b).data(), &[2.0]);
        assert_ne!(store.get(a).data(), &[1.0]);
    }
}
