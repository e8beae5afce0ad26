//! Named parameter storage with parallel momentum buffers.

use std::collections::BTreeMap;

use rand::Rng;

use crate::error::{DanError, Result};
use crate::tensor::Tensor;

/// Parameters keyed by hierarchical name (`"rdan/visual/step1/w_v"`).
///
/// Iteration is in name order, which keeps every reduction over the whole set
/// (gradient norms, checkpoint layout) deterministic.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, Tensor>,
    momentum: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    /// Adds a parameter with a zeroed momentum buffer.
    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Result<()> {
        let name = name.into();
        if self.params.contains_key(&name) {
            return Err(DanError::DuplicateParam(name));
        }
        self.momentum.insert(name.clone(), Tensor::zeros(value.shape()));
        self.params.insert(name, value);
        Ok(())
    }

    /// Glorot-uniform matrix in `±√(6 / (fan_in + fan_out))`.
    pub fn insert_glorot<R: Rng + ?Sized>(
        &mut self,
        name: impl Into<String>,
        rows: usize,
        cols: usize,
        rng: &mut R,
    ) -> Result<()> {
        let bound = (6.0 / (rows + cols) as f64).sqrt();
        let data = (0..rows * cols)
            .map(|_| rng.random_range(-bound..bound))
            .collect();
        self.insert(name, Tensor::matrix(rows, cols, data)?)
    }

    pub fn insert_zeros(&mut self, name: impl Into<String>, shape: &[usize]) -> Result<()> {
        self.insert(name, Tensor::zeros(shape))
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.get_mut(name)
    }

    pub fn momentum(&self, name: &str) -> Option<&Tensor> {
        self.momentum.get(name)
    }

    /// Replaces a parameter value, keeping its shape.
    pub fn set(&mut self, name: &str, value: Tensor) -> Result<()> {
        let slot = self
            .params
            .get_mut(name)
            .ok_or_else(|| DanError::UnknownParam(name.to_string()))?;
        if slot.shape() != value.shape() {
            return Err(DanError::Shape {
                op: "ParamStore::set",
                left: slot.shape().to_vec(),
                right: value.shape().to_vec(),
            });
        }
        *slot = value;
        Ok(())
    }

    pub fn set_momentum(&mut self, name: &str, value: Tensor) -> Result<()> {
        let param_shape = self
            .params
            .get(name)
            .ok_or_else(|| DanError::UnknownParam(name.to_string()))?
            .shape()
            .to_vec();
        if param_shape != value.shape() {
            return Err(DanError::Shape {
                op: "ParamStore::set_momentum",
                left: param_shape,
                right: value.shape().to_vec(),
            });
        }
        self.momentum.insert(name.to_string(), value);
        Ok(())
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    /// Parameter and momentum buffer pairs, mutably, in name order.
    pub(crate) fn iter_with_momentum_mut(
        &mut self,
    ) -> impl Iterator<Item = (&str, &mut Tensor, &mut Tensor)> {
        self.params
            .iter_mut()
            .zip(self.momentum.values_mut())
            .map(|((k, p), m)| (k.as_str(), p, m))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_elements(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    pub fn reset_momentum(&mut self) {
        for m in self.momentum.values_mut() {
            m.data_mut().fill(0.0);
        }
    }
}
