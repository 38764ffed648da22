//! Adam with per-parameter step counts, so that segments updated on
//! different schedules keep correct bias correction.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::autograd::Gradients;
use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 2e-4, beta1: 0.5, beta2: 0.999, eps: 1e-8 }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.eps > 0.0) {
            return Err(Error::Config("Adam betas must lie in [0, 1) and eps must be positive".into()));
        }
        Ok(())
    }
}

/// Moment estimates of one parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamSlot {
    pub step: u64,
    pub m: Tensor,
    pub v: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    slots: BTreeMap<String, AdamSlot>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self { config, slots: BTreeMap::new() }
    }

    pub fn slots(&self) -> impl Iterator<Item = (&str, &AdamSlot)> {
        self.slots.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn insert_slot(&mut self, name: String, slot: AdamSlot) {
        self.slots.insert(name, slot);
    }

    /// Apply the gradients of every parameter named `"{prefix}/{name}"` to
    /// `store`. Parameters without a gradient are left untouched.
    pub fn update(&mut self, prefix: &str, store: &mut ParamStore, grads: &Gradients) -> Result<()> {
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let names: Vec<String> = store.names().map(str::to_string).collect();
        for name in names {
            let key = format!("{prefix}/{name}");
            let Some(g) = grads.param(&key) else { continue };
            let param = store.get_mut(&name).expect("name taken from the store");
            if g.shape() != param.shape() {
                return Err(Error::shape(format!("gradient of `{key}` is {:?}, parameter {:?}", g.shape(), param.shape())));
            }
            let slot = self.slots.entry(key).or_insert_with(|| AdamSlot {
                step: 0,
                m: Tensor::zeros(param.shape()),
                v: Tensor::zeros(param.shape()),
            });
            slot.step += 1;
            let c1 = 1.0 - beta1.powi(slot.step as i32);
            let c2 = 1.0 - beta2.powi(slot.step as i32);
            let m = slot.m.data_mut();
            let v = slot.v.data_mut();
            let p = param.data_mut();
            for i in 0..p.len() {
                let gi = g.data()[i];
                m[i] = beta1 * m[i] + (1.0 - beta1) * gi;
                v[i] = beta2 * v[i] + (1.0 - beta2) * gi * gi;
                let mh = m[i] / c1;
                let vh = v[i] / c2;
                p[i] -= lr * mh / (vh.sqrt() + eps);
            }
        }
        Ok(())
    }
}
