//! Named parameter storage and per-graph binding.

use std::collections::HashMap;

use mmt_autodiff::{Graph, Real, Tensor, Var};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{MmtError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

/// Ordered collection of named tensors. Insertion order is the canonical
/// order used by checkpoints and optimizer state.
#[derive(Debug, Clone, Default)]
pub struct ParamStore<T> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
    index: HashMap<String, usize>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn insert(&mut self, name: &str, tensor: Tensor<T>) -> ParamId {
        assert!(!self.index.contains_key(name), "duplicate parameter {name}");
        self.index.insert(name.to_string(), self.names.len());
        self.names.push(name.to_string());
        self.tensors.push(tensor);
        ParamId(self.names.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.tensors[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor<T>> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(self.tensors.iter())
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    pub fn num_elements(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Replaces every value from a name-keyed map with identical names and shapes.
    pub fn load<U: Real>(&mut self, entries: &[(String, Tensor<U>)]) -> Result<()> {
        if entries.len() != self.len() {
            return Err(MmtError::Data(format!(
                "parameter count mismatch: have {}, loading {}",
                self.len(),
                entries.len()
            )));
        }
        for (name, tensor) in entries {
            let id = self
                .id(name)
                .ok_or_else(|| MmtError::Data(format!("unknown parameter {name}")))?;
            if self.get(id).shape() != tensor.shape() {
                return Err(MmtError::Data(format!(
                    "shape mismatch for {name}: {:?} vs {:?}",
                    self.get(id).shape(),
                    tensor.shape()
                )));
            }
            self.tensors[id.0] = tensor.cast();
        }
        Ok(())
    }
}

/// Glorot-style scaled uniform initializer for a `fan_in × fan_out` weight.
pub fn scaled_uniform<T: Real>(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize) -> Tensor<T> {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..fan_in * fan_out)
        .map(|_| T::of(rng.gen_range(-bound..bound)))
        .collect();
    Tensor::new(vec![fan_in, fan_out], data).expect("positive extents")
}

pub fn normal<T: Real>(rng: &mut ChaCha8Rng, shape: &[usize], std: f64) -> Tensor<T> {
    use rand_distr::{Distribution, Normal};
    let dist = Normal::new(0.0, std).expect("positive std");
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| T::of(dist.sample(rng))).collect())
        .expect("positive extents")
}

/// Lazily binds parameters into one graph, so a parameter used several times
/// (tied embeddings) is a single leaf and its gradient accumulates.
pub struct Bound<'a, T: Real> {
    store: &'a ParamStore<T>,
    vars: Vec<Option<Var>>,
}

impl<'a, T: Real> Bound<'a, T> {
    pub fn new(store: &'a ParamStore<T>) -> Self {
        Self {
            store,
            vars: vec![None; store.len()],
        }
    }

    pub fn var(&mut self, g: &mut Graph<'a, T>, id: ParamId) -> Var {
        *self.vars[id.0].get_or_insert_with(|| g.param(self.store.get(id)))
    }

    /// Gradients in store order; parameters off the loss path get `None`.
    pub fn grads(&self, g: &mut Graph<'a, T>) -> Vec<Option<Vec<T>>> {
        self.vars
            .iter()
            .map(|v| v.and_then(|v| g.take_grad(v)))
            .collect()
    }
}
