use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::Matrix;

static NEXT_STORE: AtomicU64 = AtomicU64::new(1);

/// Identifier of one parameter inside one [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId {
    store: u64,
    index: usize,
}

impl ParamId {
    pub fn index(self) -> usize {
        self.index
    }

    pub(crate) fn store(self) -> u64 {
        self.store
    }
}

#[derive(Debug, Clone)]
struct Param {
    name: String,
    value: Matrix,
}

/// Named, ordered collection of trainable matrices.
#[derive(Debug)]
pub struct ParamStore {
    id: u64,
    params: Vec<Param>,
    by_name: HashMap<String, usize>,
}

impl Default for ParamStore {
    fn default() -> Self {
        Self::new()
    }
}

impl Clone for ParamStore {
    /// Clones get a fresh identity so tapes never confuse the two.
    fn clone(&self) -> Self {
        Self {
            id: NEXT_STORE.fetch_add(1, Ordering::Relaxed),
            params: self.params.clone(),
            by_name: self.by_name.clone(),
        }
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self {
            id: NEXT_STORE.fetch_add(1, Ordering::Relaxed),
            params: Vec::new(),
            by_name: HashMap::new(),
        }
    }

    /// Register a parameter. Names must be unique within the store.
    pub fn add(&mut self, name: impl Into<String>, value: Matrix) -> ParamId {
        let name = name.into();
        assert!(
            !self.by_name.contains_key(&name),
            "duplicate parameter name {name}"
        );
        let index = self.params.len();
        self.by_name.insert(name.clone(), index);
        self.params.push(Param { name, value });
        ParamId {
            store: self.id,
            index,
        }
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.params.len()).map(|index| ParamId {
            store: self.id,
            index,
        })
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).map(|&index| ParamId {
            store: self.id,
            index,
        })
    }

    fn check(&self, id: ParamId) {
        assert_eq!(id.store, self.id, "parameter belongs to another store");
    }

    pub fn name(&self, id: ParamId) -> &str {
        self.check(id);
        &self.params[id.index].name
    }

    pub fn value(&self, id: ParamId) -> &Matrix {
        self.check(id);
        &self.params[id.index].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Matrix {
        self.check(id);
        &mut self.params[id.index].value
    }

    /// Total number of scalar entries.
    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// `(name, value)` pairs in registration order.
    pub fn iter(&self) -> impl Iterator<Item = (&str, &Matrix)> {
        self.params.iter().map(|p| (p.name.as_str(), &p.value))
    }
}
