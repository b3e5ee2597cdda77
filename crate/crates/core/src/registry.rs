//! Name-keyed registries of interchangeable strategies.
//!
//! Each pluggable piece (forecast loss, structure regularizer, metric) is a
//! trait object registered under a lower-case name and looked up at run time
//! from config files or command-line flags.

use std::sync::Arc;

use crate::error::{GaetsError, Result};

pub struct Registry<T: ?Sized> {
    kind: &'static str,
    entries: Vec<(&'static str, Arc<T>)>,
}

impl<T: ?Sized> Registry<T> {
    pub fn new(kind: &'static str) -> Self {
        Registry { kind, entries: Vec::new() }
    }

    /// Adds or replaces the entry called `name`.
    pub fn register(&mut self, name: &'static str, item: Arc<T>) -> &mut Self {
        match self.entries.iter_mut().find(|(n, _)| *n == name) {
            Some(slot) => slot.1 = item,
            None => self.entries.push((name, item)),
        }
        self
    }

    /// Case-insensitive lookup.
    pub fn get(&self, name: &str) -> Result<Arc<T>> {
        self.entries
            .iter()
            .find(|(n, _)| n.eq_ignore_ascii_case(name))
            .map(|(_, item)| Arc::clone(item))
            .ok_or_else(|| GaetsError::UnknownStrategy {
                kind: self.kind,
                name: name.to_string(),
                available: self.names().join(", "),
            })
    }

    pub fn names(&self) -> Vec<&'static str> {
        self.entries.iter().map(|(n, _)| *n).collect()
    }

    pub fn kind(&self) -> &'static str {
        self.kind
    }
}
