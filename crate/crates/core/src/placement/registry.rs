use std::collections::BTreeMap;
use std::fmt;

use super::{Centralised, HorizontalDistributed, PlacementAlgorithm, PlacementError, VerticalDistributed};

pub type AlgorithmConstructor = Box<dyn Fn() -> Box<dyn PlacementAlgorithm> + Send + Sync>;

/// Name-keyed factory for placement algorithms.
pub struct AlgorithmRegistry {
    constructors: BTreeMap<String, AlgorithmConstructor>,
}

impl fmt::Debug for AlgorithmRegistry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_set().entries(self.constructors.keys()).finish()
    }
}

impl AlgorithmRegistry {
    pub fn empty() -> Self {
        Self {
            constructors: BTreeMap::new(),
        }
    }

    /// Registry preloaded with `v1`, `v2` and `v3`.
    pub fn with_defaults() -> Self {
        let mut r = Self::empty();
        r.register("v1", Box::new(|| Box::new(VerticalDistributed))).unwrap();
        r.register("v2", Box::new(|| Box::new(HorizontalDistributed))).unwrap();
        r.register("v3", Box::new(|| Box::new(Centralised))).unwrap();
        r
    }

    pub fn register(&mut self, name: &str, constructor: AlgorithmConstructor) -> Result<(), PlacementError> {
        if self.constructors.contains_key(name) {
            return Err(PlacementError::DuplicateName(name.to_string()));
        }
        self.constructors.insert(name.to_string(), constructor);
        Ok(())
    }

    pub fn resolve(&self, name: &str) -> Result<Box<dyn PlacementAlgorithm>, PlacementError> {
        self.constructors
            .get(name)
            .map(|c| c())
            .ok_or_else(|| PlacementError::UnknownAlgorithm(name.to_string()))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.constructors.keys().map(String::as_str)
    }
}

impl Default for AlgorithmRegistry {
    fn default() -> Self {
        Self::with_defaults()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn resolve_registered() {
        let r = AlgorithmRegistry::with_defaults();
        assert_eq!(r.resolve("v2").unwrap().name(), "v2");
        assert_eq!(r.names().collect::<Vec<_>>(), vec!["v1", "v2", "v3"]);
    }

    #[test]
    fn resolve_unknown() {
        let r = AlgorithmRegistry::with_defaults();
        assert!(matches!(r.resolve("nope"), Err(PlacementError::UnknownAlgorithm(n)) if n == "nope"));
    }

    #[test]
    fn duplicate_register() {
        let mut r = AlgorithmRegistry::empty();
        r.register("v2", Box::new(|| Box::new(HorizontalDistributed))).unwrap();
        assert!(matches!(
            r.register("v2", Box::new(|| Box::new(HorizontalDistributed))),
            Err(PlacementError::DuplicateName(_))
        ));
    }
}
