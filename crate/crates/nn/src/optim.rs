//! First-order optimizers with per-parameter state keyed by parameter name.
//!
//! Defaults follow the Keras conventions (`epsilon = 1e-7`, RMSProp
//! `rho = 0.9`).

use std::collections::{BTreeMap, HashMap};

use crate::{Module, NnError, Result, Tensor};

pub trait Optimizer {
    /// Applies one update to every parameter of `module` that has a gradient.
    fn step(&mut self, module: &mut dyn Module, grads: &HashMap<String, Tensor>) -> Result<()>;
    fn learning_rate(&self) -> f64;
    fn set_learning_rate(&mut self, lr: f64);
    /// Serialisable snapshot of the moment buffers.
    fn state(&self) -> Vec<(String, Tensor)>;
    fn load_state(&mut self, state: Vec<(String, Tensor)>) -> Result<()>;
}

#[derive(Clone, Debug)]
pub struct RmsProp {
    lr: f64,
    rho: f32,
    eps: f32,
    sq_avg: BTreeMap<String, Tensor>,
}

impl RmsProp {
    pub fn new(lr: f64) -> Self {
        Self::with_params(lr, 0.9, 1e-7)
    }

    pub fn with_params(lr: f64, rho: f32, eps: f32) -> Self {
        Self {
            lr,
            rho,
            eps,
            sq_avg: BTreeMap::new(),
        }
    }
}

impl Optimizer for RmsProp {
    fn step(&mut self, module: &mut dyn Module, grads: &HashMap<String, Tensor>) -> Result<()> {
        let mut err = None;
        let lr = self.lr as f32;
        module.visit_mut(&mut |name, param| {
            let Some(g) = grads.get(name) else { return };
            if g.shape() != param.shape() {
                err = Some(NnError::Shape(format!("gradient for {name} has wrong shape")));
                return;
            }
            let s = self
                .sq_avg
                .entry(name.to_string())
                .or_insert_with(|| Tensor::zeros_like(param));
            for ((p, gi), si) in param.data_mut().iter_mut().zip(g.data()).zip(s.data_mut()) {
                *si = self.rho * *si + (1.0 - self.rho) * gi * gi;
                *p -= lr * gi / (si.sqrt() + self.eps);
            }
        });
        err.map_or(Ok(()), Err)
    }

    fn learning_rate(&self) -> f64 {
        self.lr
    }

    fn set_learning_rate(&mut self, lr: f64) {
        self.lr = lr;
    }

    fn state(&self) -> Vec<(String, Tensor)> {
        self.sq_avg
            .iter()
            .map(|(k, v)| (format!("sq_avg/{k}"), v.clone()))
            .collect()
    }

    fn load_state(&mut self, state: Vec<(String, Tensor)>) -> Result<()> {
        self.sq_avg.clear();
        for (k, v) in state {
            let name = k
                .strip_prefix("sq_avg/")
                .ok_or_else(|| NnError::State(format!("unexpected RMSProp state entry {k}")))?;
            self.sq_avg.insert(name.to_string(), v);
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct Adam {
    lr: f64,
    beta1: f32,
    beta2: f32,
    eps: f32,
    step: u64,
    m: BTreeMap<String, Tensor>,
    v: BTreeMap<String, Tensor>,
}

impl Adam {
    pub fn new(lr: f64, beta1: f32, beta2: f32) -> Self {
        Self::with_params(lr, beta1, beta2, 1e-7)
    }

    pub fn with_params(lr: f64, beta1: f32, beta2: f32, eps: f32) -> Self {
        Self {
            lr,
            beta1,
            beta2,
            eps,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    /// Adam update on a plain vector; used where the "parameters" are not a
    /// module (e.g. a latent code).
    pub fn step_slice(&mut self, key: &str, param: &mut [f32], grad: &[f32]) {
        self.step += 1;
        self.update(key, param, grad);
    }

    fn update(&mut self, key: &str, param: &mut [f32], grad: &[f32]) {
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let lr = self.lr as f32;
        let m = self
            .m
            .entry(key.to_string())
            .or_insert_with(|| Tensor::zeros(&[param.len()]));
        let v = self
            .v
            .entry(key.to_string())
            .or_insert_with(|| Tensor::zeros(&[param.len()]));
        for (((p, g), mi), vi) in param
            .iter_mut()
            .zip(grad)
            .zip(m.data_mut())
            .zip(v.data_mut())
        {
            *mi = self.beta1 * *mi + (1.0 - self.beta1) * g;
            *vi = self.beta2 * *vi + (1.0 - self.beta2) * g * g;
            let m_hat = *mi / bc1;
            let v_hat = *vi / bc2;
            *p -= lr * m_hat / (v_hat.sqrt() + self.eps);
        }
    }
}

impl Optimizer for Adam {
    fn step(&mut self, module: &mut dyn Module, grads: &HashMap<String, Tensor>) -> Result<()> {
        self.step += 1;
        let mut err = None;
        module.visit_mut(&mut |name, param| {
            let Some(g) = grads.get(name) else { return };
            if g.shape() != param.shape() {
                err = Some(NnError::Shape(format!("gradient for {name} has wrong shape")));
                return;
            }
            self.update(name, param.data_mut(), g.data());
        });
        err.map_or(Ok(()), Err)
    }

    fn learning_rate(&self) -> f64 {
        self.lr
    }

    fn set_learning_rate(&mut self, lr: f64) {
        self.lr = lr;
    }

    fn state(&self) -> Vec<(String, Tensor)> {
        let mut out = vec![("step".to_string(), Tensor::full(&[1], self.step as f32))];
        out.extend(self.m.iter().map(|(k, v)| (format!("m/{k}"), v.clone())));
        out.extend(self.v.iter().map(|(k, v)| (format!("v/{k}"), v.clone())));
        out
    }

    fn load_state(&mut self, state: Vec<(String, Tensor)>) -> Result<()> {
        self.m.clear();
        self.v.clear();
        for (k, t) in state {
            if k == "step" {
                self.step = t.data().first().copied().unwrap_or(0.0) as u64;
            } else if let Some(name) = k.strip_prefix("m/") {
                self.m.insert(name.to_string(), t);
            } else if let Some(name) = k.strip_prefix("v/") {
                self.v.insert(name.to_string(), t);
            } else {
                return Err(NnError::State(format!("unexpected Adam state entry {k}")));
            }
        }
        Ok(())
    }
}
