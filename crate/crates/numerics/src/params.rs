use indexmap::IndexMap;

use crate::error::{NumericsError, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub value: Tensor,
    pub grad: Tensor,
}

/// Named trainable tensors with gradient accumulators, kept in insertion order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: IndexMap<String, Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Result<()> {
        let name = name.into();
        if self.params.contains_key(&name) {
            return Err(NumericsError::DuplicateParameter(name));
        }
        let grad = Tensor::zeros(value.shape());
        self.params.insert(name, Param { value, grad });
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Param> {
        self.params
            .get(name)
            .ok_or_else(|| NumericsError::UnknownParameter(name.to_string()))
    }

    pub fn value(&self, name: &str) -> Result<&Tensor> {
        self.get(name).map(|p| &p.value)
    }

    pub fn value_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.params
            .get_mut(name)
            .map(|p| &mut p.value)
            .ok_or_else(|| NumericsError::UnknownParameter(name.to_string()))
    }

    pub fn grad(&self, name: &str) -> Result<&Tensor> {
        self.get(name).map(|p| &p.grad)
    }

    pub(crate) fn index_of(&self, name: &str) -> Result<usize> {
        self.params
            .get_index_of(name)
            .ok_or_else(|| NumericsError::UnknownParameter(name.to_string()))
    }

    pub(crate) fn by_index(&self, i: usize) -> &Param {
        &self.params[i]
    }

    pub(crate) fn by_index_mut(&mut self, i: usize) -> &mut Param {
        &mut self.params[i]
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.params.values().map(|p| p.value.len()).sum()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Param)> {
        self.params.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn zero_grad(&mut self) {
        for p in self.params.values_mut() {
            p.grad.fill(0.0);
        }
    }
}
