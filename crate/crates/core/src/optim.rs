//! Adam with decoupled weight decay.
//!
//! One optimizer instance carries first/second-moment state keyed by
//! parameter name. Learning rates are supplied per parameter through a
//! closure so backbone and classifier groups can differ; returning `None`
//! skips the parameter entirely (no moment update, no decay), which is how
//! frozen weights stay bitwise unchanged.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::graph::{Gradients, Graph};
#[cfg(test)]
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled weight decay; 0 gives plain Adam.
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.0 }
    }
}

impl AdamConfig {
    pub fn with_weight_decay(weight_decay: f64) -> Self {
        AdamConfig { weight_decay, ..AdamConfig::default() }
    }
}

#[derive(Debug, Clone)]
struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

#[derive(Debug, Clone)]
pub struct Adam {
    cfg: AdamConfig,
    state: BTreeMap<String, Moments>,
}

impl Adam {
    pub fn new(cfg: AdamConfig) -> Self {
        Adam { cfg, state: BTreeMap::new() }
    }

    /// Apply one update to every graph parameter for which `lr_for` returns
    /// a learning rate. Parameters are visited in name order.
    pub fn step(
        &mut self,
        graph: &mut Graph,
        grads: &Gradients,
        lr_for: &dyn Fn(&str) -> Option<f64>,
    ) -> Result<()> {
        let names: Vec<String> = graph.param_names().cloned().collect();
        for name in names {
            let Some(lr) = lr_for(&name) else { continue };
            let grad = grads
                .get(&name)
                .ok_or_else(|| Error::Lookup(format!("no gradient for parameter {name:?}")))?;
            let param = graph.param_tensor_mut(&name)?;
            if grad.numel() != param.numel() {
                return Err(Error::dim(
                    &name,
                    format!("gradient numel {} != parameter numel {}", grad.numel(), param.numel()),
                ));
            }
            let entry = self.state.entry(name.clone()).or_insert_with(|| Moments {
                m: vec![0.0; param.numel()],
                v: vec![0.0; param.numel()],
                t: 0,
            });
            entry.t += 1;
            let bc1 = 1.0 - self.cfg.beta1.powi(entry.t as i32);
            let bc2 = 1.0 - self.cfg.beta2.powi(entry.t as i32);
            let data = param.data_mut();
            let gd = grad.data();
            for i in 0..data.len() {
                entry.m[i] = self.cfg.beta1 * entry.m[i] + (1.0 - self.cfg.beta1) * gd[i];
                entry.v[i] = self.cfg.beta2 * entry.v[i] + (1.0 - self.cfg.beta2) * gd[i] * gd[i];
                let mhat = entry.m[i] / bc1;
                let vhat = entry.v[i] / bc2;
                data[i] -= lr * (mhat / (vhat.sqrt() + self.cfg.eps)
                    + self.cfg.weight_decay * data[i]);
            }
            param.check_finite(&name)?;
        }
        Ok(())
    }
}

/// Apply one plain-SGD-like Adam update directly to a tensor outside any
/// graph. Used by tests.
#[cfg(test)]
pub(crate) fn quadratic_descends() -> f64 {
    let mut g = Graph::new();
    let x = g.param("x", Tensor::new(vec![2], vec![3.0, -2.0]).unwrap()).unwrap();
    let sq = g.mul(x, x);
    let loss = g.sum(sq);
    let mut opt = Adam::new(AdamConfig::default());
    let mut last = f64::INFINITY;
    for _ in 0..200 {
        let eval = g.forward(&Default::default()).unwrap();
        last = eval.value(loss).item().unwrap();
        let grads = g.backward(&eval, loss).unwrap();
        opt.step(&mut g, &grads, &|_| Some(0.05)).unwrap();
    }
    last
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adam_minimizes_quadratic() {
        assert!(quadratic_descends() < 1e-3);
    }

    #[test]
    fn skipped_params_are_bitwise_unchanged() {
        let mut g = Graph::new();
        let x = g.param("x", Tensor::new(vec![2], vec![0.123456789, -9.87]).unwrap()).unwrap();
        let sq = g.mul(x, x);
        let loss = g.sum(sq);
        let before = g.param_tensor("x").unwrap().clone();
        let eval = g.forward(&Default::default()).unwrap();
        let grads = g.backward(&eval, loss).unwrap();
        let mut opt = Adam::new(AdamConfig::with_weight_decay(0.01));
        opt.step(&mut g, &grads, &|_| None).unwrap();
        assert_eq!(g.param_tensor("x").unwrap(), &before);
    }

    #[test]
    fn weight_decay_shrinks_unused_weights() {
        // Zero gradient + decoupled decay must still shrink the weight.
        let mut g = Graph::new();
        g.param("w", Tensor::new(vec![1], vec![1.0]).unwrap()).unwrap();
        let x = g.param("x", Tensor::new(vec![1], vec![1.0]).unwrap()).unwrap();
        let sq = g.mul(x, x);
        let loss = g.sum(sq);
        let eval = g.forward(&Default::default()).unwrap();
        let grads = g.backward(&eval, loss).unwrap();
        let mut opt = Adam::new(AdamConfig::with_weight_decay(0.1));
        opt.step(&mut g, &grads, &|_| Some(1.0)).unwrap();
        let w = g.param_tensor("w").unwrap().data()[0];
        assert!((w - 0.9).abs() < 1e-12, "w = {w}");
    }
}
