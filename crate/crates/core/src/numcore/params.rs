use std::sync::atomic::{AtomicU64, Ordering};

use super::tensor::{Float, Tensor};

static NEXT_STORE_UID: AtomicU64 = AtomicU64::new(1);

fn next_uid() -> u64 {
    NEXT_STORE_UID.fetch_add(1, Ordering::Relaxed)
}

/// Handle to a tensor owned by a [`ParamStore`].
///
/// Two modules holding the same `ParamId` share one parameter, not two copies.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamEntry<T: Float> {
    pub name: String,
    pub tensor: Tensor<T>,
    /// Whether decoupled weight decay applies to this tensor.
    pub decay: bool,
}

/// Named, ordered collection of learnable tensors.
///
/// A frozen store contributes constants to a graph and never receives gradients.
#[derive(Debug)]
pub struct ParamStore<T: Float> {
    uid: u64,
    frozen: bool,
    entries: Vec<ParamEntry<T>>,
}

impl<T: Float> Clone for ParamStore<T> {
    fn clone(&self) -> Self {
        ParamStore {
            uid: next_uid(),
            frozen: self.frozen,
            entries: self.entries.clone(),
        }
    }
}

impl<T: Float> PartialEq for ParamStore<T> {
    fn eq(&self, other: &Self) -> bool {
        self.frozen == other.frozen && self.entries == other.entries
    }
}

impl<T: Float> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Float> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            uid: next_uid(),
            frozen: false,
            entries: Vec::new(),
        }
    }

    pub(crate) fn uid(&self) -> u64 {
        self.uid
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor<T>, decay: bool) -> ParamId {
        let name = name.into();
        debug_assert!(self.find(&name).is_none(), "duplicate parameter {name}");
        self.entries.push(ParamEntry {
            name,
            tensor,
            decay,
        });
        ParamId(self.entries.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id.0].tensor
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.entries[id.0].tensor
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry<T> {
        &self.entries[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn entries(&self) -> &[ParamEntry<T>] {
        &self.entries
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    pub fn numel(&self) -> usize {
        self.entries.iter().map(|e| e.tensor.numel()).sum()
    }

    /// Same parameters at another precision; ids stay valid.
    pub fn cast<U: Float>(&self) -> ParamStore<U> {
        ParamStore {
            uid: next_uid(),
            frozen: self.frozen,
            entries: self
                .entries
                .iter()
                .map(|e| ParamEntry {
                    name: e.name.clone(),
                    tensor: e.tensor.cast(),
                    decay: e.decay,
                })
                .collect(),
        }
    }
}
