//! AdamW with decoupled weight decay and the poly learning-rate schedule.

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

pub const DEFAULT_LR: f64 = 6e-5;
pub const DEFAULT_BETAS: (f64, f64) = (0.9, 0.999);
pub const DEFAULT_WEIGHT_DECAY: f64 = 0.01;
pub const DEFAULT_POLY_POWER: f64 = 0.9;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub lr: f64,
    pub betas: (f64, f64),
    pub weight_decay: f64,
    pub eps: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            lr: DEFAULT_LR,
            betas: DEFAULT_BETAS,
            weight_decay: DEFAULT_WEIGHT_DECAY,
            eps: ADAM_EPS,
        }
    }
}

impl AdamWConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |name: &str, v: f64| Error::InvalidParam {
            name: name.into(),
            detail: format!("out of range: {v}"),
        };
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(bad("lr", self.lr));
        }
        for (name, b) in [("beta1", self.betas.0), ("beta2", self.betas.1)] {
            if !(0.0..1.0).contains(&b) {
                return Err(bad(name, b));
            }
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(bad("weight_decay", self.weight_decay));
        }
        if !(self.eps > 0.0) {
            return Err(bad("eps", self.eps));
        }
        Ok(())
    }
}

/// `(1 - iter / total)^power`, clamped at 0 past the end.
pub fn poly_factor(iter: usize, total: usize, power: f64) -> f64 {
    if total == 0 || iter >= total {
        return 0.0;
    }
    (1.0 - iter as f64 / total as f64).powf(power)
}

#[derive(Clone, Debug)]
struct Moments {
    m: Tensor,
    v: Tensor,
}

#[derive(Clone, Debug)]
pub struct AdamW {
    pub cfg: AdamWConfig,
    step: u64,
    state: Vec<Option<Moments>>,
}

impl AdamW {
    pub fn new(cfg: AdamWConfig) -> Self {
        AdamW {
            cfg,
            step: 0,
            state: Vec::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One update at learning rate `lr`. `grads[i]` belongs to parameter
    /// `i`; `None` entries and frozen parameters are skipped.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Option<Tensor>], lr: f64) -> Result<()> {
        if grads.len() != store.len() {
            return Err(Error::shape("adamw", format!("{} gradients for {} parameters", grads.len(), store.len())));
        }
        if self.state.len() < store.len() {
            self.state.resize(store.len(), None);
        }
        self.step += 1;
        let (b1, b2) = self.cfg.betas;
        let bc1 = 1.0 - b1.powi(self.step as i32);
        let bc2 = 1.0 - b2.powi(self.step as i32);
        let decay = 1.0 - lr * self.cfg.weight_decay;
        for (i, g) in grads.iter().enumerate() {
            let id = ParamId(i);
            let Some(g) = g else { continue };
            if !store.param(id).trainable {
                continue;
            }
            let p = store.get_mut(id);
            if g.shape() != p.shape() {
                return Err(Error::shape("adamw", format!("gradient {:?} for parameter {:?}", g.shape(), p.shape())));
            }
            let st = self.state[i].get_or_insert_with(|| Moments {
                m: Tensor::zeros(p.shape()),
                v: Tensor::zeros(p.shape()),
            });
            let (m, v) = (st.m.data_mut(), st.v.data_mut());
            for (k, (w, &gk)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                m[k] = b1 * m[k] + (1.0 - b1) * gk;
                v[k] = b2 * v[k] + (1.0 - b2) * gk * gk;
                let mh = m[k] / bc1;
                let vh = v[k] / bc2;
                *w = *w * decay - lr * mh / (vh.sqrt() + self.cfg.eps);
            }
        }
        Ok(())
    }
}
