use std::collections::BTreeMap;

use super::graph::{Graph, Var};
use super::tensor::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Named trainable parameters plus non-trainable buffers (running
/// statistics). Names sort deterministically, which fixes the iteration order
/// everywhere parameters are visited.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct ParamStore<T> {
    params: BTreeMap<String, Tensor<T>>,
    buffers: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            params: BTreeMap::new(),
            buffers: BTreeMap::new(),
        }
    }

    pub fn insert_param(&mut self, name: impl Into<String>, value: Tensor<T>) {
        self.params.insert(name.into(), value);
    }

    pub fn insert_buffer(&mut self, name: impl Into<String>, value: Tensor<T>) {
        self.buffers.insert(name.into(), value);
    }

    pub fn param(&self, name: &str) -> Result<&Tensor<T>> {
        self.params
            .get(name)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown parameter {name}")))
    }

    pub fn param_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        self.params
            .get_mut(name)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown parameter {name}")))
    }

    pub fn buffer(&self, name: &str) -> Result<&Tensor<T>> {
        self.buffers
            .get(name)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown buffer {name}")))
    }

    pub fn params(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn buffers(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.buffers.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn param_count(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            params: self.params.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
            buffers: self.buffers.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
        }
    }

    pub fn apply_buffer_updates(&mut self, updates: Vec<(String, Tensor<T>)>) -> Result<()> {
        for (name, value) in updates {
            let slot = self
                .buffers
                .get_mut(&name)
                .ok_or_else(|| Error::InvalidArgument(format!("unknown buffer {name}")))?;
            if slot.shape() != value.shape() {
                return Err(Error::dim("buffer update", name));
            }
            *slot = value;
        }
        Ok(())
    }
}

/// Binds store entries onto a [`Graph`] on first use during a forward pass.
pub struct Binder<'s, T: Scalar> {
    store: &'s ParamStore<T>,
    trainable: bool,
    bound: BTreeMap<String, Var>,
    buffer_updates: Vec<(String, Tensor<T>)>,
}

impl<'s, T: Scalar> Binder<'s, T> {
    /// Parameters become trainable leaves.
    pub fn trainable(store: &'s ParamStore<T>) -> Self {
        Self::with_mode(store, true)
    }

    /// Parameters become constants: nothing upstream of them is recorded for
    /// differentiation.
    pub fn frozen(store: &'s ParamStore<T>) -> Self {
        Self::with_mode(store, false)
    }

    fn with_mode(store: &'s ParamStore<T>, trainable: bool) -> Self {
        Binder {
            store,
            trainable,
            bound: BTreeMap::new(),
            buffer_updates: Vec::new(),
        }
    }

    pub fn var(&mut self, g: &mut Graph<T>, name: &str) -> Result<Var> {
        if let Some(&v) = self.bound.get(name) {
            return Ok(v);
        }
        let value = self.store.param(name)?.clone();
        let v = if self.trainable {
            g.param(value)
        } else {
            g.constant(value)
        };
        self.bound.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn buffer(&self, name: &str) -> Result<&'s Tensor<T>> {
        self.store.buffer(name)
    }

    pub fn stage_buffer(&mut self, name: &str, value: Tensor<T>) {
        self.buffer_updates.push((name.to_string(), value));
    }

    pub fn take_buffer_updates(&mut self) -> Vec<(String, Tensor<T>)> {
        std::mem::take(&mut self.buffer_updates)
    }

    pub fn bound(&self) -> impl Iterator<Item = (&str, Var)> {
        self.bound.iter().map(|(k, &v)| (k.as_str(), v))
    }

    /// Gradients of every bound parameter that received one.
    pub fn grads(&self, g: &Graph<T>) -> BTreeMap<String, Tensor<T>> {
        self.bound
            .iter()
            .filter_map(|(k, &v)| g.grad(v).map(|t| (k.clone(), t.clone())))
            .collect()
    }
}
