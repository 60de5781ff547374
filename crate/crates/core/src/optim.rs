//! AdamW with decoupled weight decay and a serialisable state.

use std::collections::BTreeMap;

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{self, TensorMap, TensorRecord, VarMap};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl AdamWConfig {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        AdamWConfig {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
        }
    }
}

#[derive(Debug, Clone)]
pub struct AdamW {
    pub config: AdamWConfig,
    step: u64,
    m: TensorMap,
    v: TensorMap,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamWState {
    pub config: AdamWConfig,
    pub step: u64,
    pub m: BTreeMap<String, TensorRecord>,
    pub v: BTreeMap<String, TensorRecord>,
}

impl AdamW {
    pub fn new(config: AdamWConfig) -> Self {
        AdamW {
            config,
            step: 0,
            m: TensorMap::new(),
            v: TensorMap::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One update. Variables without an entry in `grads` are treated as
    /// having zero gradient.
    pub fn step(&mut self, vars: &VarMap, grads: &TensorMap) -> Result<()> {
        let c = self.config;
        self.step += 1;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        for (name, var) in vars {
            let p = var.as_tensor().detach();
            let g = match grads.get(name) {
                Some(g) => g.detach(),
                None => p.zeros_like()?,
            };
            let m = match self.m.get(name) {
                Some(m) => ((m * c.beta1)? + (&g * (1.0 - c.beta1))?)?,
                None => (&g * (1.0 - c.beta1))?,
            };
            let v = match self.v.get(name) {
                Some(v) => ((v * c.beta2)? + (g.sqr()? * (1.0 - c.beta2))?)?,
                None => (g.sqr()? * (1.0 - c.beta2))?,
            };
            let update = ((&m / bc1)? / ((&v / bc2)?.sqrt()? + c.eps)?)?;
            let update = (update + (&p * c.weight_decay)?)?;
            let next = (&p - (update * c.lr)?)?;
            if next.flatten_all()?.to_vec1::<f64>()?.iter().any(|x| !x.is_finite()) {
                return Err(Error::Numeric(format!("non-finite update for {name}")));
            }
            var.set(&next)?;
            self.m.insert(name.clone(), m);
            self.v.insert(name.clone(), v);
        }
        Ok(())
    }

    pub fn state(&self) -> Result<AdamWState> {
        Ok(AdamWState {
            config: self.config,
            step: self.step,
            m: nn::record_map(&self.m)?,
            v: nn::record_map(&self.v)?,
        })
    }

    pub fn from_state(s: &AdamWState) -> Result<Self> {
        Ok(AdamW {
            config: s.config,
            step: s.step,
            m: nn::restore_map(&s.m)?,
            v: nn::restore_map(&s.v)?,
        })
    }
}

/// Gradients of `loss` for each named variable; variables the loss does not
/// depend on are omitted.
pub fn gradients(loss: &Tensor, vars: &VarMap) -> Result<TensorMap> {
    let store = loss.backward()?;
    Ok(vars
        .iter()
        .filter_map(|(k, v)| store.get(v.as_tensor()).map(|g| (k.clone(), g.clone())))
        .collect())
}
