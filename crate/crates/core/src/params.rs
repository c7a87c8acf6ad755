//! Named, layer-indexed trainable tensors with freeze support.
//!
//! Freezing comes in two granularities: a whole-tensor flag (used while
//! training masks over a fixed network) and an optional per-element freeze
//! mask (used by the transfer pipeline, which pins only the weights claimed
//! by earlier tasks). Frozen values must be bitwise untouched by the
//! optimizer.

use std::collections::HashMap;

use crate::element::Element;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct Param<E> {
    pub name: String,
    pub layer: usize,
    pub tensor: Tensor<E>,
    pub frozen: bool,
    /// Per-element freeze; `true` entries never change. `None` means no
    /// element-level freezing.
    pub frozen_elems: Option<Vec<bool>>,
}

impl<E: Element> Param<E> {
    pub fn numel(&self) -> usize {
        self.tensor.numel()
    }
}

/// Insertion-ordered collection of parameters. Iteration order is part of
/// the determinism contract: gradient reduction, serialization and mask
/// alignment all follow it.
#[derive(Debug, Clone, Default)]
pub struct ParamStore<E> {
    params: Vec<Param<E>>,
    index: HashMap<String, usize>,
}

impl<E: Element> ParamStore<E> {
    pub fn new() -> Self {
        ParamStore {
            params: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, layer: usize, tensor: Tensor<E>) -> Result<()> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::Mask(format!("duplicate parameter name {name:?}")));
        }
        self.index.insert(name.clone(), self.params.len());
        self.params.push(Param {
            name,
            layer,
            tensor,
            frozen: false,
            frozen_elems: None,
        });
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn total_numel(&self) -> usize {
        self.params.iter().map(|p| p.numel()).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param<E>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param<E>> {
        self.params.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.iter().map(|p| p.name.as_str())
    }

    pub fn get(&self, name: &str) -> Option<&Param<E>> {
        self.index.get(name).map(|&i| &self.params[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Param<E>> {
        let i = *self.index.get(name)?;
        Some(&mut self.params[i])
    }

    pub fn freeze_all(&mut self) {
        for p in &mut self.params {
            p.frozen = true;
        }
    }

    pub fn unfreeze_all(&mut self) {
        for p in &mut self.params {
            p.frozen = false;
            p.frozen_elems = None;
        }
    }

    /// Bit patterns of every tensor, in insertion order. Used to assert
    /// frozen-weight integrity across pipeline stages.
    pub fn snapshot_bits(&self) -> Vec<Vec<u64>> {
        self.params.iter().map(|p| p.tensor.to_bits()).collect()
    }

    pub fn layers(&self) -> Vec<usize> {
        let mut layers: Vec<usize> = self.params.iter().map(|p| p.layer).collect();
        layers.sort_unstable();
        layers.dedup();
        layers
    }

    /// Parameter count per layer (used by sharing reports).
    pub fn layer_sizes(&self) -> HashMap<usize, usize> {
        let mut sizes = HashMap::new();
        for p in &self.params {
            *sizes.entry(p.layer).or_insert(0) += p.numel();
        }
        sizes
    }
}
