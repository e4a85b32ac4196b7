use std::sync::atomic::{AtomicU64, Ordering};

use super::{Result, Tensor, TensorError};

static NEXT_STORE_ID: AtomicU64 = AtomicU64::new(1);

/// Named trainable tensors with a mutation counter.
///
/// Every mutable access bumps `generation`. A tape records the generation it
/// was built against, and gradients from an older generation are refused.
#[derive(Debug)]
pub struct ParamStore {
    id: u64,
    generation: u64,
    names: Vec<String>,
    values: Vec<Tensor>,
}

impl Clone for ParamStore {
    fn clone(&self) -> Self {
        Self {
            id: NEXT_STORE_ID.fetch_add(1, Ordering::Relaxed),
            generation: self.generation,
            names: self.names.clone(),
            values: self.values.clone(),
        }
    }
}

impl PartialEq for ParamStore {
    fn eq(&self, other: &Self) -> bool {
        self.names == other.names && self.values == other.values
    }
}

impl Default for ParamStore {
    fn default() -> Self {
        Self::new()
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self {
            id: NEXT_STORE_ID.fetch_add(1, Ordering::Relaxed),
            generation: 0,
            names: Vec::new(),
            values: Vec::new(),
        }
    }

    pub(crate) fn id(&self) -> u64 {
        self.id
    }

    pub fn generation(&self) -> u64 {
        self.generation
    }

    /// Adds a parameter, or replaces the value of an existing one.
    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        let name = name.into();
        self.generation += 1;
        match self.index_of(&name) {
            Some(i) => self.values[i] = value,
            None => {
                self.names.push(name);
                self.values.push(value);
            }
        }
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index_of(name).is_some()
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.index_of(name)
            .map(|i| &self.values[i])
            .ok_or_else(|| TensorError::UnknownParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        let i = self
            .index_of(name)
            .ok_or_else(|| TensorError::UnknownParam(name.to_string()))?;
        self.generation += 1;
        Ok(&mut self.values[i])
    }

    /// Mutable access to every parameter at once; counts as one mutation.
    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.generation += 1;
        self.names
            .iter()
            .map(String::as_str)
            .zip(self.values.iter_mut())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names
            .iter()
            .map(String::as_str)
            .zip(self.values.iter())
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }
}

/// Gradients for every parameter of one store, in store order.
#[derive(Clone, Debug)]
pub struct ParamGrads {
    pub(crate) store_id: u64,
    pub(crate) generation: u64,
    pub(crate) grads: Vec<(String, Tensor)>,
}

impl ParamGrads {
    pub fn generation(&self) -> u64 {
        self.generation
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.grads.iter().find(|(n, _)| n == name).map(|(_, g)| g)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.grads.iter().map(|(n, g)| (n.as_str(), g))
    }

    /// Checks that these gradients were produced against `store` as it is now.
    pub fn check_fresh(&self, store: &ParamStore) -> Result<()> {
        if self.store_id != store.id() {
            return Err(TensorError::ForeignStore);
        }
        if self.generation != store.generation() {
            return Err(TensorError::StaleTape {
                recorded: self.generation,
                current: store.generation(),
            });
        }
        Ok(())
    }
}
