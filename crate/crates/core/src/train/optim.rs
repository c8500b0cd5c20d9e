//! AdamW with decoupled weight decay.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Params;
use crate::tensor::Tensor;

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct AdamWConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            lr: 1e-4,
            weight_decay: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamWConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config("lr must be finite and non-negative".into()));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::Config("weight_decay must be finite and non-negative".into()));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!("{name} must lie in [0,1)")));
            }
        }
        if self.eps <= 0.0 {
            return Err(Error::Config("eps must be positive".into()));
        }
        Ok(())
    }
}

/// First/second-moment state per parameter, keyed by parameter name.
#[derive(Clone, Debug)]
pub struct AdamW {
    cfg: AdamWConfig,
    t: u64,
    m: BTreeMap<String, Tensor>,
    v: BTreeMap<String, Tensor>,
}

impl AdamW {
    pub fn new(cfg: AdamWConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(AdamW { cfg, t: 0, m: BTreeMap::new(), v: BTreeMap::new() })
    }

    pub fn lr(&self) -> f64 {
        self.cfg.lr
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.cfg.lr = lr;
    }

    /// One decoupled update:
    /// `theta -= lr * (m_hat / (sqrt(v_hat) + eps) + weight_decay * theta)`.
    ///
    /// Parameters absent from `grads` are left untouched (no decay either),
    /// so a frozen tensor stays bitwise identical.
    pub fn step(&mut self, params: &mut Params, grads: &BTreeMap<String, Tensor>) {
        self.t += 1;
        let b1 = self.cfg.beta1;
        let b2 = self.cfg.beta2;
        let bc1 = 1.0 - b1.powi(self.t as i32);
        let bc2 = 1.0 - b2.powi(self.t as i32);
        for (name, g) in grads {
            let p = params.get_mut(name);
            assert_eq!(p.shape(), g.shape(), "gradient shape mismatch for {name}");
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(g.rows(), g.cols()));
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(g.rows(), g.cols()));
            for i in 0..p.rows() {
                for j in 0..p.cols() {
                    let gi = g.get(i, j);
                    let mi = b1 * m.get(i, j) + (1.0 - b1) * gi;
                    let vi = b2 * v.get(i, j) + (1.0 - b2) * gi * gi;
                    m.set(i, j, mi);
                    v.set(i, j, vi);
                    let m_hat = mi / bc1;
                    let v_hat = vi / bc2;
                    let theta = p.get(i, j);
                    let update = m_hat / (v_hat.sqrt() + self.cfg.eps)
                        + self.cfg.weight_decay * theta;
                    p.set(i, j, theta - self.cfg.lr * update);
                }
            }
        }
    }
}
