//! Name-keyed registries for the interchangeable strategies used by the
//! system: pool aggregation methods, variant classifiers and speech adapters.
//!
//! Each strategy family keeps its own registry of factories. Configuration
//! files and CLI flags select an entry by name at runtime.

use std::collections::BTreeMap;
use std::fmt;

/// A registry of strategy factories keyed by name.
#[derive(Clone)]
pub struct Registry<F> {
    family: &'static str,
    entries: BTreeMap<String, F>,
}

impl<F> Registry<F> {
    pub fn new(family: &'static str) -> Self {
        Self {
            family,
            entries: BTreeMap::new(),
        }
    }

    /// Registers `factory` under `name`, returning the factory it replaced.
    pub fn register(&mut self, name: impl Into<String>, factory: F) -> Option<F> {
        self.entries.insert(name.into(), factory)
    }

    pub fn get(&self, name: &str) -> Option<&F> {
        self.entries.get(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    /// Registered names in lexical order.
    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn family(&self) -> &'static str {
        self.family
    }
}

impl<F> fmt::Debug for Registry<F> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Registry")
            .field("family", &self.family)
            .field("entries", &self.entries.keys().collect::<Vec<_>>())
            .finish()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn register_and_lookup() {
        let mut reg: Registry<fn() -> u32> = Registry::new("numbers");
        assert!(reg.register("one", || 1).is_none());
        reg.register("two", || 2);
        assert_eq!((reg.get("two").unwrap())(), 2);
        assert!(reg.get("three").is_none());
        assert_eq!(reg.names().collect::<Vec<_>>(), vec!["one", "two"]);
        assert!(reg.register("one", || 11).is_some());
        assert_eq!((reg.get("one").unwrap())(), 11);
    }
}
