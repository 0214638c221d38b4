//! Named parameter tensors and their binding onto a gradient tape.

use alloc::string::{String, ToString};
use alloc::vec::Vec;

use crate::autodiff::{Gradients, Tape, Var};
use crate::error::{ensure, Result};
use crate::tensor::Tensor;

/// Ordered collection of uniquely named tensors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends a tensor and returns its slot.
    pub fn push(&mut self, name: &str, tensor: Tensor) -> Result<usize> {
        ensure!(self.index_of(name).is_none(), "duplicate parameter name {name:?}");
        self.names.push(name.to_string());
        self.tensors.push(tensor);
        Ok(self.tensors.len() - 1)
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index_of(name).map(|i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.index_of(name).map(move |i| &mut self.tensors[i])
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn scalar_count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Places every tensor on `tape`, as differentiable leaves when
    /// `trainable` and as constants otherwise.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> BoundParams {
        let vars = self
            .tensors
            .iter()
            .map(|t| if trainable { tape.leaf(t.clone()) } else { tape.constant(t.clone()) })
            .collect();
        BoundParams { vars }
    }

    /// Replaces every tensor with one of the same shape, keeping names.
    pub fn replace_all(&mut self, tensors: Vec<Tensor>) -> Result<()> {
        ensure!(tensors.len() == self.tensors.len(), "expected {} tensors, got {}", self.tensors.len(), tensors.len());
        for (old, new) in self.tensors.iter().zip(&tensors) {
            ensure!(old.dims() == new.dims(), "shape mismatch {:?} vs {:?}", old.dims(), new.dims());
        }
        self.tensors = tensors;
        Ok(())
    }
}

/// Tape handles for a [`ParamStore`], in store order.
#[derive(Debug, Clone, Default)]
pub struct BoundParams {
    vars: Vec<Var>,
}

impl BoundParams {
    pub fn var(&self, slot: usize) -> Var {
        self.vars[slot]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    /// Per-parameter gradients in store order; unreached parameters get zeros.
    pub fn gradients(&self, grads: &Gradients, store: &ParamStore) -> Vec<Tensor> {
        self.vars
            .iter()
            .zip(store.tensors())
            .map(|(v, t)| grads.get(*v).cloned().unwrap_or_else(|| Tensor::zeros(t.dims())))
            .collect()
    }
}
