//! Named parameter storage and per-tape binding.

use std::collections::{BTreeMap, HashMap};

use crate::tape::{Tape, Var};
use crate::tensor::{Result, Tensor, TensorError};

/// Parameters keyed by dotted name. Trainability is the tensor's `requires_grad` flag.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) {
        self.params.insert(name.into(), tensor);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn remove(&mut self, name: &str) -> Option<Tensor> {
        self.params.remove(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.params.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.params.keys()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Marks each parameter trainable according to `rule(name)`.
    pub fn set_trainable(&mut self, rule: impl Fn(&str) -> bool) {
        for (name, t) in &mut self.params {
            t.set_requires_grad(rule(name));
        }
    }

    /// Number of scalar values in trainable parameters whose name starts with `prefix`.
    pub fn trainable_count(&self, prefix: &str) -> usize {
        self.params
            .iter()
            .filter(|(n, t)| n.starts_with(prefix) && t.requires_grad())
            .map(|(_, t)| t.numel())
            .sum()
    }

    /// Copy of every parameter's values, for drift comparisons.
    pub fn snapshot(&self) -> BTreeMap<String, Vec<f64>> {
        self.params
            .iter()
            .map(|(n, t)| (n.clone(), t.data().to_vec()))
            .collect()
    }
}

/// A tape together with the parameters bound into it so far.
///
/// Parameters are bound lazily on first use, so a forward pass only records
/// the parameters it touches.
pub struct Graph<'s> {
    pub tape: Tape,
    store: &'s ParamStore,
    bound: HashMap<String, Var>,
}

impl<'s> Graph<'s> {
    pub fn new(store: &'s ParamStore) -> Self {
        Self {
            tape: Tape::new(),
            store,
            bound: HashMap::new(),
        }
    }

    /// Uses pre-recorded variables for the named parameters instead of binding from the store.
    pub fn with_bound(tape: Tape, store: &'s ParamStore, bound: HashMap<String, Var>) -> Self {
        Self { tape, store, bound }
    }

    pub fn param(&mut self, name: &str) -> Result<Var> {
        if let Some(&v) = self.bound.get(name) {
            return Ok(v);
        }
        let t = self
            .store
            .get(name)
            .ok_or_else(|| TensorError::Contract(format!("missing parameter `{name}`")))?;
        let v = self.tape.leaf(t.clone());
        self.bound.insert(name.to_owned(), v);
        Ok(v)
    }

    /// Gradients of every bound parameter that received one.
    pub fn grads(&self) -> BTreeMap<String, Vec<f64>> {
        self.bound
            .iter()
            .filter_map(|(n, &v)| self.tape.grad(v).map(|g| (n.clone(), g.to_vec())))
            .collect()
    }

    pub fn into_tape(self) -> Tape {
        self.tape
    }
}
