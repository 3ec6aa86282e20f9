use std::collections::BTreeMap;

use candle_core::backprop::GradStore;
use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ParamStore;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias correction. Moment buffers are keyed by parameter name so
/// they can travel in a checkpoint.
#[derive(Debug, Clone)]
pub struct Adam {
    pub config: AdamConfig,
    step: u64,
    moments: BTreeMap<String, (Tensor, Tensor)>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update with learning rate `lr`. Parameters without a
    /// gradient keep their value and moments.
    pub fn step(&mut self, store: &ParamStore, grads: &GradStore, lr: f64) -> Result<()> {
        self.step += 1;
        let AdamConfig { beta1, beta2, eps } = self.config;
        let t = self.step as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        for (name, var) in store.vars() {
            let Some(g) = grads.get(var.as_tensor()) else {
                continue;
            };
            let g = g.detach();
            let (m, v) = match self.moments.get(name) {
                Some((m, v)) => (m.clone(), v.clone()),
                None => (g.zeros_like()?, g.zeros_like()?),
            };
            let m = (m.affine(beta1, 0.0)? + g.affine(1.0 - beta1, 0.0)?)?;
            let v = (v.affine(beta2, 0.0)? + g.sqr()?.affine(1.0 - beta2, 0.0)?)?;
            let denom = (v.affine(1.0 / c2, 0.0)?.sqrt()? + eps)?;
            let update = (m.affine(lr / c1, 0.0)? / denom)?;
            var.set(&(var.as_tensor().detach() - update)?)?;
            self.moments.insert(name.to_string(), (m, v));
        }
        Ok(())
    }

    /// Moment buffers as `m.<name>` / `v.<name>` tensors.
    pub fn state_tensors(&self) -> BTreeMap<String, Tensor> {
        let mut out = BTreeMap::new();
        for (name, (m, v)) in &self.moments {
            out.insert(format!("m.{name}"), m.clone());
            out.insert(format!("v.{name}"), v.clone());
        }
        out
    }

    pub fn from_state(config: AdamConfig, step: u64, mut tensors: BTreeMap<String, Tensor>) -> Result<Self> {
        let names: Vec<String> = tensors.keys().filter_map(|k| k.strip_prefix("m.")).map(str::to_string).collect();
        let mut moments = BTreeMap::new();
        for name in names {
            let m = tensors.remove(&format!("m.{name}")).expect("listed key");
            let v = tensors
                .remove(&format!("v.{name}"))
                .ok_or_else(|| Error::Checkpoint(format!("optimizer state for {name} lacks a second moment")))?;
            moments.insert(name, (m, v));
        }
        if let Some(extra) = tensors.keys().next() {
            return Err(Error::Checkpoint(format!("unexpected optimizer tensor {extra}")));
        }
        Ok(Self { config, step, moments })
    }
}
