//! Named parameter registry shared by every model.
//!
//! Entries keep insertion order (the canonical order used by checkpoints and
//! optimizers) and are keyed by dotted paths like `blocks.0.attn.qkv.weight`.
//! Non-trainable buffers (e.g. batchnorm running statistics) live in the same
//! map with `requires_grad == false`.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Default)]
pub struct ModelWeights {
    entries: Vec<(String, Tensor)>,
    index: HashMap<String, usize>,
}

impl ModelWeights {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<()> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::contract(format!("duplicate parameter name '{name}'")));
        }
        self.index.insert(name.clone(), self.entries.len());
        self.entries.push((name, tensor));
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.index
            .get(name)
            .map(|&i| &self.entries[i].1)
            .ok_or_else(|| Error::contract(format!("missing parameter '{name}'")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn entries(&self) -> &[(String, Tensor)] {
        &self.entries
    }

    pub fn names(&self) -> Vec<String> {
        self.entries.iter().map(|(n, _)| n.clone()).collect()
    }

    /// Trainable parameters in canonical order.
    pub fn trainable(&self) -> Vec<Tensor> {
        self.entries
            .iter()
            .filter(|(_, t)| t.requires_grad())
            .map(|(_, t)| t.clone())
            .collect()
    }

    /// Total scalar count across all entries (parameters and buffers).
    pub fn total_len(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.len()).sum()
    }

    /// Scalar count over trainable parameters only.
    pub fn trainable_len(&self) -> usize {
        self.entries
            .iter()
            .filter(|(_, t)| t.requires_grad())
            .map(|(_, t)| t.len())
            .sum()
    }

    /// Copies values from `other` into this registry. Key sets and shapes
    /// must match exactly.
    pub fn load_values_from(&mut self, other: &ModelWeights) -> Result<()> {
        if self.entries.len() != other.entries.len() {
            return Err(Error::contract(format!(
                "weight count mismatch: {} vs {}",
                self.entries.len(),
                other.entries.len()
            )));
        }
        for (name, tensor) in &self.entries {
            let src = other.get(name)?;
            if src.shape() != tensor.shape() {
                return Err(Error::shape(format!(
                    "parameter '{name}': shape {:?} vs {:?}",
                    tensor.shape(),
                    src.shape()
                )));
            }
            tensor.set_data_internal(src.to_vec());
        }
        Ok(())
    }

    pub fn zero_grads(&self) {
        for (_, t) in &self.entries {
            t.zero_grad();
        }
    }
}

impl Tensor {
    pub(crate) fn set_data_internal(&self, data: Vec<f64>) {
        self.set_data(data);
    }
}
