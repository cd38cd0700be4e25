use std::collections::BTreeMap;

use rand::Rng;

use super::Tensor;
use crate::error::{Error, Result};

/// A trainable tensor and its gradient. Both always share one shape.
#[derive(Clone, Debug)]
pub struct Param {
    value: Tensor,
    grad: Tensor,
}

impl Param {
    pub fn value(&self) -> &Tensor {
        &self.value
    }

    pub fn grad(&self) -> &Tensor {
        &self.grad
    }
}

/// Named trainable tensors, iterated in name order.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    entries: BTreeMap<String, Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Result<()> {
        let name = name.into();
        if self.entries.contains_key(&name) {
            return Err(Error::Contract(format!("parameter `{name}` already exists")));
        }
        let grad = Tensor::zeros_like(&value);
        self.entries.insert(
            name,
            Param {
                value: value.with_requires_grad(true),
                grad,
            },
        );
        Ok(())
    }

    /// Registers a `[rows, cols]` parameter drawn from
    /// `uniform(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
    pub fn insert_uniform<R: Rng>(
        &mut self,
        name: impl Into<String>,
        rows: usize,
        cols: usize,
        fan_in: usize,
        rng: &mut R,
    ) -> Result<()> {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let data = (0..rows * cols)
            .map(|_| rng.gen_range(-bound..bound))
            .collect();
        self.insert(name, Tensor::matrix(rows, cols, data)?)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    fn entry(&self, name: &str) -> Result<&Param> {
        self.entries
            .get(name)
            .ok_or_else(|| Error::Contract(format!("unknown parameter `{name}`")))
    }

    fn entry_mut(&mut self, name: &str) -> Result<&mut Param> {
        self.entries
            .get_mut(name)
            .ok_or_else(|| Error::Contract(format!("unknown parameter `{name}`")))
    }

    pub fn value(&self, name: &str) -> Result<&Tensor> {
        Ok(&self.entry(name)?.value)
    }

    pub fn grad(&self, name: &str) -> Result<&Tensor> {
        Ok(&self.entry(name)?.grad)
    }

    pub fn value_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        Ok(&mut self.entry_mut(name)?.value)
    }

    pub fn set_value(&mut self, name: &str, value: Tensor) -> Result<()> {
        let p = self.entry_mut(name)?;
        p.value.expect_same_shape(&value, "set_value")?;
        p.value = value.with_requires_grad(true);
        Ok(())
    }

    pub fn set_grad(&mut self, name: &str, grad: Tensor) -> Result<()> {
        let p = self.entry_mut(name)?;
        p.grad.expect_same_shape(&grad, "set_grad")?;
        p.grad = grad;
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        for p in self.entries.values_mut() {
            p.grad.data_mut().fill(0.0);
        }
    }

    pub(crate) fn params_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor, &Tensor)> {
        self.entries
            .iter_mut()
            .map(|(k, p)| (k.as_str(), &mut p.value, &p.grad))
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.entries.values().map(|p| p.value.numel()).sum()
    }
}
