use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{ParamStore, Tensor};
use crate::error::{Error, Result};

/// Applies one update to every parameter from its stored gradient.
/// Gradients are left untouched.
pub trait Optimizer {
    fn step(&mut self, store: &mut ParamStore) -> Result<()>;
}

fn check_lr(lr: f64) -> Result<()> {
    if lr.is_finite() && lr > 0.0 {
        Ok(())
    } else {
        Err(Error::Config(format!(
            "learning rate must be positive and finite, got {lr}"
        )))
    }
}

#[derive(Clone, Debug)]
pub struct Sgd {
    lr: f64,
}

impl Sgd {
    pub fn new(lr: f64) -> Result<Self> {
        check_lr(lr)?;
        Ok(Self { lr })
    }
}

impl Optimizer for Sgd {
    fn step(&mut self, store: &mut ParamStore) -> Result<()> {
        for (_, value, grad) in store.params_mut() {
            for (v, g) in value.data_mut().iter_mut().zip(grad.data()) {
                *v -= self.lr * g;
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamHyper {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias-corrected moment estimates.
#[derive(Clone, Debug)]
pub struct Adam {
    lr: f64,
    hyper: AdamHyper,
    t: i32,
    moments: BTreeMap<String, (Tensor, Tensor)>,
}

impl Adam {
    pub fn new(lr: f64, hyper: AdamHyper) -> Result<Self> {
        check_lr(lr)?;
        if !(0.0..1.0).contains(&hyper.beta1) || !(0.0..1.0).contains(&hyper.beta2) {
            return Err(Error::Config("Adam betas must lie in [0, 1)".into()));
        }
        if hyper.eps <= 0.0 {
            return Err(Error::Config("Adam epsilon must be positive".into()));
        }
        Ok(Self {
            lr,
            hyper,
            t: 0,
            moments: BTreeMap::new(),
        })
    }

    pub fn steps_taken(&self) -> i32 {
        self.t
    }
}

impl Optimizer for Adam {
    fn step(&mut self, store: &mut ParamStore) -> Result<()> {
        self.t += 1;
        let AdamHyper { beta1, beta2, eps } = self.hyper;
        let c1 = 1.0 - beta1.powi(self.t);
        let c2 = 1.0 - beta2.powi(self.t);
        for (name, value, grad) in store.params_mut() {
            let (m, v) = self
                .moments
                .entry(name.to_string())
                .or_insert_with(|| (Tensor::zeros_like(grad), Tensor::zeros_like(grad)));
            let it = value
                .data_mut()
                .iter_mut()
                .zip(grad.data())
                .zip(m.data_mut().iter_mut().zip(v.data_mut()));
            for ((p, &g), (mi, vi)) in it {
                *mi = beta1 * *mi + (1.0 - beta1) * g;
                *vi = beta2 * *vi + (1.0 - beta2) * g * g;
                let m_hat = *mi / c1;
                let v_hat = *vi / c2;
                *p -= self.lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
