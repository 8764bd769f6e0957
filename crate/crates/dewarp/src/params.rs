//! Named parameter collections.
//!
//! Parameters live in a sorted map so that every walk over them (optimizer
//! updates, checkpoint serialization, gradient collection) is in one
//! deterministic order.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tape::{Grads, Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Default)]
pub struct ParamMap<S: Scalar> {
    inner: BTreeMap<String, Tensor<S>>,
}

impl<S: Scalar> ParamMap<S> {
    pub fn new() -> Self {
        ParamMap { inner: BTreeMap::new() }
    }

    /// Registers a fresh parameter; a duplicate name is a bug.
    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<S>) -> Result<()> {
        let name = name.into();
        if self.inner.contains_key(&name) {
            return Err(Error::Contract(format!("duplicate parameter name {name:?}")));
        }
        self.inner.insert(name, value);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<S>> {
        self.inner
            .get(name)
            .ok_or_else(|| Error::Contract(format!("unknown parameter {name:?}")))
    }

    pub fn set(&mut self, name: &str, value: Tensor<S>) -> Result<()> {
        let slot = self
            .inner
            .get_mut(name)
            .ok_or_else(|| Error::Contract(format!("unknown parameter {name:?}")))?;
        if slot.shape() != value.shape() {
            return Err(Error::Dim(format!(
                "parameter {name:?}: cannot replace shape {:?} with {:?}",
                slot.shape(),
                value.shape()
            )));
        }
        *slot = value;
        Ok(())
    }

    pub fn contains(&self, name: &str) -> bool {
        self.inner.contains_key(name)
    }

    /// Name-sorted iteration.
    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<S>)> {
        self.inner.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.inner.keys().map(|s| s.as_str())
    }

    pub fn len(&self) -> usize {
        self.inner.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inner.is_empty()
    }

    /// Total scalar count across all parameters.
    pub fn numel(&self) -> usize {
        self.inner.values().map(|t| t.numel()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.inner.values().all(|t| t.all_finite())
    }

    pub fn to_f32(&self) -> ParamMap<f32> {
        ParamMap {
            inner: self.inner.iter().map(|(k, v)| (k.clone(), v.to_f32())).collect(),
        }
    }

    pub fn to_f64(&self) -> ParamMap<f64> {
        ParamMap {
            inner: self.inner.iter().map(|(k, v)| (k.clone(), v.to_f64())).collect(),
        }
    }
}

/// Tape handles for one forward pass over a parameter set.
pub struct BoundParams {
    vars: BTreeMap<String, Var>,
    frozen: BTreeMap<String, bool>,
}

impl BoundParams {
    /// Binds every parameter onto the tape. Names matching `frozen` become
    /// constants: they take part in the forward pass but receive no
    /// gradient, so the backward pass skips their whole subgraph cost.
    pub fn bind<S: Scalar>(
        tape: &mut Tape<S>,
        params: &ParamMap<S>,
        frozen: impl Fn(&str) -> bool,
    ) -> Self {
        let mut vars = BTreeMap::new();
        let mut fr = BTreeMap::new();
        for (name, value) in params.iter() {
            let is_frozen = frozen(name);
            let var = if is_frozen {
                tape.constant(value.clone())
            } else {
                tape.param(value.clone())
            };
            vars.insert(name.clone(), var);
            fr.insert(name.clone(), is_frozen);
        }
        BoundParams { vars, frozen: fr }
    }

    /// Binds everything trainable.
    pub fn bind_all<S: Scalar>(tape: &mut Tape<S>, params: &ParamMap<S>) -> Self {
        Self::bind(tape, params, |_| false)
    }

    pub fn var(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Contract(format!("unbound parameter {name:?}")))
    }

    /// Pulls gradients for every trainable bound parameter. A trainable
    /// parameter that did not participate in the loss is simply absent.
    pub fn collect_grads<S: Scalar>(&self, grads: &mut Grads<S>) -> BTreeMap<String, Tensor<S>> {
        let mut out = BTreeMap::new();
        for (name, &var) in &self.vars {
            if self.frozen[name] {
                continue;
            }
            if let Some(g) = grads.take(var) {
                out.insert(name.clone(), g);
            }
        }
        out
    }
}
