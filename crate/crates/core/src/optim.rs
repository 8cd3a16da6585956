//! AdamW with decoupled weight decay.

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::{Element, Tensor};

#[derive(Clone, Copy, Debug)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        // beta1 0.937 is the training-table momentum read as Adam's first
        // moment coefficient.
        AdamWConfig { lr: 0.002, beta1: 0.937, beta2: 0.999, eps: 1e-8, weight_decay: 5e-4 }
    }
}

pub struct AdamW<T> {
    pub cfg: AdamWConfig,
    pub step_count: u64,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
}

impl<T: Element> AdamW<T> {
    pub fn new(cfg: AdamWConfig, store: &ParamStore<T>) -> Result<Self> {
        if cfg.lr <= 0.0 {
            return Err(Error::InvalidArg(format!("learning rate {} must be positive", cfg.lr)));
        }
        let m = store.params().map(|(_, p)| Tensor::zeros(p.value.shape())).collect();
        let v = store.params().map(|(_, p)| Tensor::zeros(p.value.shape())).collect();
        Ok(AdamW { cfg, step_count: 0, m, v })
    }

    /// One update over all parameters from their accumulated grads.
    /// Decay is decoupled: applied to the value, never folded into the grad.
    pub fn step(&mut self, store: &mut ParamStore<T>) {
        self.step_count += 1;
        let t = self.step_count as i32;
        let c = self.cfg;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let decay = T::from_f64(1.0 - c.lr * c.weight_decay);
        let (b1, b1c) = (T::from_f64(c.beta1), T::from_f64(1.0 - c.beta1));
        let (b2, b2c) = (T::from_f64(c.beta2), T::from_f64(1.0 - c.beta2));
        for i in 0..store.len() {
            let id = crate::params::ParamId(i);
            let grad = store.grad(id).clone();
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            for ((mv, vv), g) in m.iter_mut().zip(v.iter_mut()).zip(grad.data()) {
                *mv = b1 * *mv + b1c * *g;
                *vv = b2 * *vv + b2c * *g * *g;
            }
            let m = &self.m[i];
            let v = &self.v[i];
            let value = store.value_mut(id);
            let data = value.data_mut();
            for ((p, mv), vv) in data.iter_mut().zip(m.data()).zip(v.data()) {
                let mhat = mv.as_f64() / bc1;
                let vhat = vv.as_f64() / bc2;
                let upd = c.lr * mhat / (vhat.sqrt() + c.eps);
                *p = decay * *p - T::from_f64(upd);
            }
        }
    }

    /// Moment tensors for checkpointing, in parameter order.
    pub fn moments(&self) -> (&[Tensor<T>], &[Tensor<T>]) {
        (&self.m, &self.v)
    }

    pub fn restore(&mut self, step_count: u64, m: Vec<Tensor<T>>, v: Vec<Tensor<T>>) -> Result<()> {
        if m.len() != self.m.len() || v.len() != self.v.len() {
            return Err(Error::InvalidArg(format!(
                "optimizer state has {} moment pairs, model has {}",
                m.len(),
                self.m.len()
            )));
        }
        for (new, old) in m.iter().chain(v.iter()).zip(self.m.iter().chain(self.v.iter())) {
            if new.shape() != old.shape() {
                return Err(Error::InvalidArg("optimizer moment shape mismatch".into()));
            }
        }
        self.step_count = step_count;
        self.m = m;
        self.v = v;
        Ok(())
    }
}
