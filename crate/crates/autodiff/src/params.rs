//! Named parameter tables.

use std::collections::BTreeMap;

use crate::error::{AutodiffError, Result};
use crate::graph::{Graph, Var};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Ordered map from dotted parameter names to tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T: Scalar> {
    tensors: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self { tensors: BTreeMap::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>) {
        self.tensors.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.tensors.get_mut(name)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor<T>> {
        self.tensors.get(name).ok_or_else(|| AutodiffError::UnknownParameter(name.to_string()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.tensors.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of scalars.
    pub fn scalar_count(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    /// Entries whose name starts with `prefix`.
    pub fn subset(&self, prefix: &str) -> ParamStore<T> {
        ParamStore {
            tensors: self
                .tensors
                .iter()
                .filter(|(k, _)| k.starts_with(prefix))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
        }
    }

    /// Inserts every entry of `other`, replacing existing names.
    pub fn merge(&mut self, other: ParamStore<T>) {
        self.tensors.extend(other.tensors);
    }

    /// Puts every parameter on `graph`; trainable ones as named leaves.
    pub fn bind<'g>(&self, graph: &'g Graph<T>, trainable: bool) -> Bound<'g, T> {
        let vars = self
            .tensors
            .iter()
            .map(|(name, t)| {
                let v = if trainable { graph.param(name, t.clone()) } else { graph.constant(t.clone()) };
                (name.clone(), v)
            })
            .collect();
        Bound { vars }
    }
}

/// Parameters placed on a graph, looked up by name during a forward pass.
pub struct Bound<'g, T: Scalar> {
    vars: BTreeMap<String, Var<'g, T>>,
}

impl<'g, T: Scalar> Bound<'g, T> {
    pub fn get(&self, name: &str) -> Var<'g, T> {
        match self.vars.get(name) {
            Some(v) => *v,
            None => panic!("parameter `{name}` is not bound"),
        }
    }

    pub fn contains(&self, name: &str) -> bool {
        self.vars.contains_key(name)
    }

    /// Merges two bindings (e.g. trainable generator + frozen discriminator).
    pub fn with(mut self, other: Bound<'g, T>) -> Self {
        self.vars.extend(other.vars);
        self
    }
}
