use std::collections::HashMap;

use super::{Real, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A trainable tensor and its accumulated gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct Parameter<T = f32> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
}

/// Named parameters in insertion order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore<T = f32> {
    params: Vec<Parameter<T>>,
    by_name: HashMap<String, usize>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            params: Vec::new(),
            by_name: HashMap::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(Error::InvalidArgument(format!("duplicate parameter {name:?}")));
        }
        let grad = Tensor::zeros(value.shape());
        self.by_name.insert(name.clone(), self.params.len());
        self.params.push(Parameter { name, value, grad });
        Ok(ParamId(self.params.len() - 1))
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).map(|&i| ParamId(i))
    }

    pub fn get(&self, id: ParamId) -> &Parameter<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter<T> {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].value
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter<T>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter<T>> {
        self.params.iter_mut()
    }

    pub fn num_values(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.fill(T::zero());
        }
    }

    /// Same names and values in another element type, gradients zeroed.
    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        let mut out = ParamStore::new();
        for p in &self.params {
            out.add(p.name.clone(), p.value.cast()).expect("names already unique");
        }
        out
    }

    /// Overwrites values from another store with identical names and shapes.
    pub fn load_values(&mut self, other: &ParamStore<T>) -> Result<()> {
        if other.len() != self.len() {
            return Err(Error::Config(format!(
                "parameter count mismatch: {} vs {}",
                self.len(),
                other.len()
            )));
        }
        for (mine, theirs) in self.params.iter_mut().zip(&other.params) {
            if mine.name != theirs.name || mine.value.shape() != theirs.value.shape() {
                return Err(Error::Config(format!(
                    "parameter {:?}{:?} does not match {:?}{:?}",
                    mine.name,
                    mine.value.shape(),
                    theirs.name,
                    theirs.value.shape()
                )));
            }
            mine.value = theirs.value.clone();
        }
        Ok(())
    }
}
