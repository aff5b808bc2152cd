//! Named parameter and buffer storage shared by every layer of a model.

use crate::error::{NnError, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EntryKind {
    /// Updated by the optimizer.
    Param,
    /// Running statistics; saved with the model but never differentiated.
    Buffer,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Entry {
    pub name: String,
    pub kind: EntryKind,
    pub value: Tensor,
}

/// Flat list of named tensors. Layers address their entries by slot index.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    entries: Vec<Entry>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, kind: EntryKind, value: Tensor) -> usize {
        self.entries.push(Entry {
            name: name.into(),
            kind,
            value,
        });
        self.entries.len() - 1
    }

    pub fn get(&self, slot: usize) -> &Tensor {
        &self.entries[slot].value
    }

    pub fn get_mut(&mut self, slot: usize) -> &mut Tensor {
        &mut self.entries[slot].value
    }

    pub fn entries(&self) -> &[Entry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn find(&self, name: &str) -> Option<usize> {
        self.entries.iter().position(|e| e.name == name)
    }

    /// Number of trainable scalars.
    pub fn num_trainable(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.kind == EntryKind::Param)
            .map(|e| e.value.len())
            .sum()
    }

    /// Replaces every value by the tensor of the same name in `named`.
    /// Names, order and shapes must match exactly.
    pub fn load_named(&mut self, named: Vec<(String, Tensor)>) -> Result<()> {
        if named.len() != self.entries.len() {
            return Err(NnError::InvalidModel(format!(
                "expected {} tensors, found {}",
                self.entries.len(),
                named.len()
            )));
        }
        for (entry, (name, value)) in self.entries.iter_mut().zip(named) {
            if entry.name != name {
                return Err(NnError::InvalidModel(format!(
                    "expected tensor `{}`, found `{name}`",
                    entry.name
                )));
            }
            if entry.value.shape() != value.shape() {
                return Err(NnError::ShapeMismatch {
                    expected: entry.value.shape().to_vec(),
                    actual: value.shape().to_vec(),
                });
            }
            entry.value = value;
        }
        Ok(())
    }
}

/// Gradients aligned slot-for-slot with a [`ParamStore`]; buffer slots stay empty.
#[derive(Clone, Debug, PartialEq)]
pub struct Grads {
    tensors: Vec<Tensor>,
}

impl Grads {
    pub fn zeros_for(store: &ParamStore) -> Self {
        let tensors = store
            .entries()
            .iter()
            .map(|e| match e.kind {
                EntryKind::Param => Tensor::zeros_like(&e.value),
                EntryKind::Buffer => Tensor::default(),
            })
            .collect();
        Self { tensors }
    }

    pub fn get(&self, slot: usize) -> &Tensor {
        &self.tensors[slot]
    }

    pub fn get_mut(&mut self, slot: usize) -> &mut Tensor {
        &mut self.tensors[slot]
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn add_assign(&mut self, other: &Grads) {
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            a.add_assign(b);
        }
    }

    pub fn scale(&mut self, factor: f32) {
        for t in &mut self.tensors {
            t.scale(factor);
        }
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::all_finite)
    }

    pub fn global_norm(&self) -> f32 {
        self.tensors.iter().map(Tensor::sum_sq).sum::<f32>().sqrt()
    }
}
