use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::nnprims::tape::{Gradients, Tape, Var};
use crate::nnprims::tensor::Tensor;

/// Named trainable tensors. Iteration order is the lexicographic order of the
/// names, which keeps optimiser updates and checkpoints deterministic.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    tensors: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.tensors.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    /// Same names and shapes, all zeros.
    pub fn zeros_like(&self) -> ParamStore {
        ParamStore {
            tensors: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), Tensor::zeros(v.rows(), v.cols())))
                .collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.values().all(Tensor::all_finite)
    }
}

/// Lazily places parameters on a tape the first time a computation asks for
/// them, so each parameter maps to exactly one leaf.
pub struct Binder<'p> {
    params: &'p ParamStore,
    bound: BTreeMap<String, Var>,
}

impl<'p> Binder<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Binder {
            params,
            bound: BTreeMap::new(),
        }
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
    }

    pub fn var(&mut self, tape: &mut Tape, name: &str) -> Result<Var> {
        if let Some(&v) = self.bound.get(name) {
            return Ok(v);
        }
        let t = self
            .params
            .get(name)
            .ok_or_else(|| Error::Invalid(format!("unknown parameter {name}")))?;
        let v = tape.leaf(t.clone());
        self.bound.insert(name.to_owned(), v);
        Ok(v)
    }

    /// Gradient for every parameter in the store, zero where unbound.
    pub fn collect_grads(&self, grads: &mut Gradients) -> ParamStore {
        let mut out = self.params.zeros_like();
        for (name, g) in out.iter_mut() {
            if let Some(&v) = self.bound.get(name) {
                *g = grads.take(v);
            }
        }
        out
    }
}
