use serde::{Deserialize, Serialize};

use super::{Result, TrainError};
use crate::model::{Checkpoint, HeadParams};
use crate::tensor::{ParamGrads, ParamStore, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// Moment buffers, keyed by parameter name in store order.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimState {
    pub config: AdamWConfig,
    pub step: u64,
    m: Vec<(String, Tensor)>,
    v: Vec<(String, Tensor)>,
}

const STEP_KEY: &str = "optim.step";

impl OptimState {
    pub fn new(config: AdamWConfig, store: &ParamStore) -> Self {
        let zeros = || {
            store
                .iter()
                .map(|(n, t)| (n.to_string(), Tensor::zeros(t.shape())))
                .collect()
        };
        Self {
            config,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn first_moment(&self, name: &str) -> Option<&Tensor> {
        self.m.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn second_moment(&self, name: &str) -> Option<&Tensor> {
        self.v.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// One AdamW update of every parameter for which `trainable` holds.
    /// `decays` selects the parameters that receive weight decay.
    pub fn step(
        &mut self,
        store: &mut ParamStore,
        grads: &ParamGrads,
        lr: f64,
        trainable: impl Fn(&str) -> bool,
        decays: impl Fn(&str) -> bool,
    ) -> Result<()> {
        grads.check_fresh(store)?;
        for (name, g) in grads.iter() {
            if !g.is_finite() {
                return Err(TrainError::NonFiniteGradient(name.to_string()));
            }
        }
        self.step += 1;
        let AdamWConfig {
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for (((name, p), (_, m)), (_, v)) in store
            .iter_mut()
            .zip(self.m.iter_mut())
            .zip(self.v.iter_mut())
        {
            if !trainable(name) {
                continue;
            }
            let g = grads
                .get(name)
                .ok_or_else(|| TrainError::Shape(format!("no gradient for `{name}`")))?;
            if g.shape() != p.shape() {
                return Err(TrainError::Shape(format!(
                    "gradient for `{name}` has shape {:?}",
                    g.shape()
                )));
            }
            let wd = if decays(name) { weight_decay } else { 0.0 };
            for (((p, m), v), &g) in p
                .data_mut()
                .iter_mut()
                .zip(m.data_mut())
                .zip(v.data_mut())
                .zip(g.data())
            {
                *m = beta1 * *m + (1.0 - beta1) * g;
                *v = beta2 * *v + (1.0 - beta2) * g * g;
                let mhat = *m / bc1;
                let vhat = *v / bc2;
                *p -= lr * wd * *p + lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }

    /// [`Self::step`] on a head, followed by the logit-scale clamp.
    pub fn step_head(
        &mut self,
        head: &mut HeadParams,
        grads: &ParamGrads,
        lr: f64,
        trainable: impl Fn(&str) -> bool,
    ) -> Result<()> {
        self.step(&mut head.store, grads, lr, trainable, HeadParams::decays)?;
        head.clamp_log_scale();
        Ok(())
    }

    pub fn write_checkpoint(&self, ckpt: &mut Checkpoint) {
        for ((name, m), (_, v)) in self.m.iter().zip(&self.v) {
            ckpt.insert(format!("optim.m.{name}"), m.clone());
            ckpt.insert(format!("optim.v.{name}"), v.clone());
        }
        ckpt.insert(STEP_KEY, Tensor::scalar(self.step as f64));
    }

    pub fn from_checkpoint(
        config: AdamWConfig,
        store: &ParamStore,
        ckpt: &Checkpoint,
    ) -> Result<Self> {
        let mut state = Self::new(config, store);
        state.step = ckpt.require(STEP_KEY)?.data()[0] as u64;
        for ((name, m), (_, v)) in state.m.iter_mut().zip(state.v.iter_mut()) {
            for (slot, key) in [
                (m, format!("optim.m.{name}")),
                (v, format!("optim.v.{name}")),
            ] {
                let t = ckpt.require(&key)?;
                if t.shape() != slot.shape() {
                    return Err(TrainError::Shape(format!(
                        "`{key}` has shape {:?}",
                        t.shape()
                    )));
                }
                *slot = t.clone();
            }
        }
        Ok(state)
    }
}
