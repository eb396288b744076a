//! Named parameter storage shared by the model, adapters and optimizer.

use std::collections::HashMap;

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::init::Init;
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

/// Ordered collection of named tensors.
///
/// Removal leaves a tombstone so ids handed out earlier stay valid.
#[derive(Clone, Debug)]
pub struct ParamStore<T> {
    entries: Vec<Option<(String, Tensor<T>)>>,
    index: HashMap<String, ParamId>,
    meta: bool,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            entries: Vec::new(),
            index: HashMap::new(),
            meta: false,
        }
    }

    /// A store whose tensors only carry shapes.
    pub fn new_meta() -> Self {
        Self {
            meta: true,
            ..Self::new()
        }
    }

    pub fn is_meta(&self) -> bool {
        self.meta
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor<T>, trainable: bool) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter name `{name}`")));
        }
        let mut tensor = tensor;
        tensor.trainable = trainable;
        let id = ParamId(self.entries.len());
        self.entries.push(Some((name.clone(), tensor)));
        self.index.insert(name, id);
        Ok(id)
    }

    /// Creates a parameter from an init rule, or a shape-only tensor in a
    /// meta store.
    pub fn create(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        init: Init,
        rng: &mut ChaCha8Rng,
    ) -> Result<ParamId> {
        let tensor = if self.meta {
            Tensor::meta(shape.to_vec())
        } else {
            init.sample(shape, rng)
        };
        self.insert(name, tensor, true)
    }

    pub fn remove(&mut self, id: ParamId) -> Option<(String, Tensor<T>)> {
        let entry = self.entries.get_mut(id.0)?.take()?;
        self.index.remove(&entry.0);
        Some(entry)
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entry(id).0
    }

    fn entry(&self, id: ParamId) -> &(String, Tensor<T>) {
        self.entries[id.0].as_ref().expect("parameter was removed")
    }

    pub fn tensor(&self, id: ParamId) -> &Tensor<T> {
        &self.entry(id).1
    }

    pub fn tensor_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.entries[id.0].as_mut().expect("parameter was removed").1
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.id(name).map(|id| self.tensor(id))
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor<T>)> {
        self.entries
            .iter()
            .enumerate()
            .filter_map(|(i, e)| e.as_ref().map(|(n, t)| (ParamId(i), n.as_str(), t)))
    }

    pub fn len(&self) -> usize {
        self.index.len()
    }

    pub fn is_empty(&self) -> bool {
        self.index.is_empty()
    }

    pub fn set_trainable_where(&mut self, pred: impl Fn(&str) -> bool, trainable: bool) {
        for (name, t) in self.entries.iter_mut().flatten() {
            if pred(name) {
                t.trainable = trainable;
            }
        }
    }

    pub fn zero_grads(&mut self) {
        for (_, t) in self.entries.iter_mut().flatten() {
            t.zero_grad();
        }
    }

    pub fn total_numel(&self) -> usize {
        self.iter().map(|(_, _, t)| t.numel()).sum()
    }

    /// Copy of every tensor's data keyed by name.
    pub fn snapshot(&self) -> Vec<(String, Vec<T>)> {
        self.iter().map(|(_, n, t)| (n.to_string(), t.data().to_vec())).collect()
    }

    /// Converts every tensor to another precision. Used by gradient checks.
    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|e| e.as_ref().map(|(n, t)| (n.clone(), t.cast())))
                .collect(),
            index: self.index.clone(),
            meta: self.meta,
        }
    }
}
