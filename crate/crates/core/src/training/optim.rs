use std::collections::BTreeMap;

use candle_core::backprop::GradStore;
use candle_core::Tensor;

use crate::error::{Error, Result};
use crate::nn::ParamStore;

/// Adam with bias correction; moments are keyed by parameter path so the
/// state can be written into and restored from checkpoints.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: BTreeMap<String, Tensor>,
    v: BTreeMap<String, Tensor>,
}

impl Adam {
    pub fn new(lr: f64, beta1: f64, beta2: f64) -> Self {
        Adam {
            lr,
            beta1,
            beta2,
            eps: 1e-8,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Updates every parameter in `params` that received a gradient.
    pub fn step(&mut self, params: &ParamStore, grads: &GradStore) -> Result<()> {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (path, var) in params.iter() {
            let Some(g) = grads.get(var.as_tensor()) else {
                continue;
            };
            let m = match self.m.get(path) {
                Some(m) => ((m * self.beta1)? + (g * (1.0 - self.beta1))?)?,
                None => (g * (1.0 - self.beta1))?,
            };
            let g2 = g.sqr()?;
            let v = match self.v.get(path) {
                Some(v) => ((v * self.beta2)? + (g2 * (1.0 - self.beta2))?)?,
                None => (g2 * (1.0 - self.beta2))?,
            };
            if self.lr != 0.0 {
                let update = ((&m / bc1)? / ((&v / bc2)?.sqrt()? + self.eps)?)?;
                var.set(&(var.as_tensor() - (update * self.lr)?)?)?;
            }
            self.m.insert(path.clone(), m.detach());
            self.v.insert(path.clone(), v.detach());
        }
        Ok(())
    }

    /// Moments under `{prefix}m.{path}` / `{prefix}v.{path}`.
    pub fn state_tensors(&self, prefix: &str) -> BTreeMap<String, Tensor> {
        let mut out = BTreeMap::new();
        for (k, t) in &self.m {
            out.insert(format!("{prefix}m.{k}"), t.clone());
        }
        for (k, t) in &self.v {
            out.insert(format!("{prefix}v.{k}"), t.clone());
        }
        out
    }

    pub fn load_state(&mut self, tensors: &BTreeMap<String, Tensor>, prefix: &str, step: u64) -> Result<()> {
        self.m.clear();
        self.v.clear();
        for (k, t) in tensors {
            let Some(rest) = k.strip_prefix(prefix) else {
                continue;
            };
            if let Some(path) = rest.strip_prefix("m.") {
                self.m.insert(path.to_string(), t.clone());
            } else if let Some(path) = rest.strip_prefix("v.") {
                self.v.insert(path.to_string(), t.clone());
            } else {
                return Err(Error::Checkpoint(format!("unexpected optimizer tensor {k}")));
            }
        }
        if self.m.len() != self.v.len() {
            return Err(Error::Checkpoint("optimizer moments are incomplete".into()));
        }
        self.step = step;
        Ok(())
    }
}
