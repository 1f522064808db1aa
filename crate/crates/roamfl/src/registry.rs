//! Named implementations of a trait, selected at runtime from config or flags.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("unknown {kind} '{name}' (available: {available})")]
pub struct UnknownName {
    pub kind: &'static str,
    pub name: String,
    pub available: String,
}

pub struct Registry<T: ?Sized> {
    kind: &'static str,
    entries: BTreeMap<&'static str, Arc<T>>,
}

impl<T: ?Sized> Registry<T> {
    pub fn new(kind: &'static str) -> Self {
        Self {
            kind,
            entries: BTreeMap::new(),
        }
    }

    /// Adds or replaces the entry for `name`.
    pub fn register(&mut self, name: &'static str, entry: Arc<T>) -> &mut Self {
        self.entries.insert(name, entry);
        self
    }

    pub fn get(&self, name: &str) -> Result<Arc<T>, UnknownName> {
        self.entries.get(name).cloned().ok_or_else(|| UnknownName {
            kind: self.kind,
            name: name.to_string(),
            available: self.names().join(", "),
        })
    }

    pub fn names(&self) -> Vec<&'static str> {
        self.entries.keys().copied().collect()
    }
}

impl<T: ?Sized> fmt::Debug for Registry<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Registry")
            .field("kind", &self.kind)
            .field("entries", &self.names())
            .finish()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    trait Greeter: Send + Sync {
        fn greet(&self) -> String;
    }

    struct Plain;
    impl Greeter for Plain {
        fn greet(&self) -> String {
            "hi".into()
        }
    }

    #[test]
    fn lookup_by_name() {
        let mut r: Registry<dyn Greeter> = Registry::new("greeter");
        r.register("plain", Arc::new(Plain));
        assert_eq!(r.get("plain").unwrap().greet(), "hi");
        let err = r.get("loud").err().unwrap();
        assert_eq!(err.to_string(), "unknown greeter 'loud' (available: plain)");
    }
}
