//! Adam and AdamW over a [`ParamStore`].

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{config_err, Error, Result};
use crate::nn::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    #[default]
    Adam,
    /// Adam with weight decay applied directly to the weights.
    Adamw,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub kind: OptimizerKind,
    pub learning_rate: f32,
    /// L2 penalty added to the gradient for Adam, decoupled decay for AdamW.
    pub weight_decay: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
}

impl AdamConfig {
    pub fn new(kind: OptimizerKind, learning_rate: f32, weight_decay: f32) -> Self {
        Self {
            kind,
            learning_rate,
            weight_decay,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(config_err!("learning rate must be finite and >= 0"));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(config_err!("weight decay must be finite and >= 0"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || self.eps <= 0.0 {
            return Err(config_err!("invalid Adam hyper-parameters"));
        }
        Ok(())
    }
}

/// First and second moment estimates, one pair per parameter slot.
#[derive(Clone, Debug)]
pub struct Adam {
    pub config: AdamConfig,
    pub step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(config: AdamConfig, store: &ParamStore) -> Result<Self> {
        config.validate()?;
        let zeros = |p: &crate::nn::Parameter| Tensor::zeros(p.values.shape());
        Ok(Self {
            config,
            step: 0,
            m: store.iter().map(|(_, p)| zeros(p)).collect(),
            v: store.iter().map(|(_, p)| zeros(p)).collect(),
        })
    }

    /// Applies one update from the accumulated gradients of every trainable
    /// parameter.
    pub fn step(&mut self, store: &mut ParamStore) -> Result<()> {
        if self.m.len() != store.len() {
            return Err(Error::State("optimizer was built for a different store".into()));
        }
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - (c.beta1 as f64).powi(t);
        let bc2 = 1.0 - (c.beta2 as f64).powi(t);
        for id in store.trainable_ids() {
            let p = store.get_mut(id);
            let w = Arc::make_mut(&mut p.values).data_mut();
            let grad = p.gradient.data();
            let m = self.m[id.0].data_mut();
            let v = self.v[id.0].data_mut();
            for i in 0..w.len() {
                let mut gi = grad[i];
                match c.kind {
                    OptimizerKind::Adam => gi += c.weight_decay * w[i],
                    OptimizerKind::Adamw => w[i] -= c.learning_rate * c.weight_decay * w[i],
                }
                m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * gi;
                v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * gi * gi;
                let m_hat = m[i] as f64 / bc1;
                let v_hat = v[i] as f64 / bc2;
                w[i] -= (c.learning_rate as f64 * m_hat / (v_hat.sqrt() + c.eps as f64)) as f32;
            }
        }
        Ok(())
    }

    /// Moments named `optim.m.<param>` / `optim.v.<param>`.
    pub fn state_tensors(&self, store: &ParamStore) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        for (id, p) in store.iter() {
            if p.trainable {
                out.push((format!("optim.m.{}", p.name), self.m[id.0].clone()));
                out.push((format!("optim.v.{}", p.name), self.v[id.0].clone()));
            }
        }
        out
    }

    pub fn load_state(&mut self, store: &ParamStore, tensors: &[(String, Tensor)], step: u64) -> Result<()> {
        let find = |n: String| tensors.iter().find(|(k, _)| *k == n).map(|(_, t)| t);
        for (id, p) in store.iter() {
            if !p.trainable {
                continue;
            }
            for (slot, prefix) in [(&mut self.m, "m"), (&mut self.v, "v")] {
                let name = format!("optim.{prefix}.{}", p.name);
                let t = find(name.clone()).ok_or_else(|| Error::Load(format!("missing {name}")))?;
                if t.shape() != p.values.shape() {
                    return Err(Error::Load(format!("shape conflict for {name}")));
                }
                slot[id.0] = t.clone();
            }
        }
        self.step = step;
        Ok(())
    }
}
