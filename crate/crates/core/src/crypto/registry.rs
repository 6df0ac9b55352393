use std::collections::{BTreeMap, BTreeSet};

/// Server-side trust table: which public keys may sign which permission
/// classes.
///
/// A class is the string from [`Permission::class`](crate::Permission::class),
/// e.g. `level:2`. Entries may also name a whole model (`level:*`) or every
/// class (`*`).
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct KeyRegistry {
    entries: BTreeMap<String, BTreeSet<Vec<u8>>>,
}

impl KeyRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(
        &mut self,
        permission_class: impl Into<String>,
        public_key: impl Into<Vec<u8>>,
    ) {
        self.entries
            .entry(permission_class.into())
            .or_default()
            .insert(public_key.into());
    }

    pub fn is_registered(&self, public_key: &[u8], permission_class: &str) -> bool {
        let holds = |class: &str| {
            self.entries
                .get(class)
                .is_some_and(|keys| keys.contains(public_key))
        };
        if holds(permission_class) || holds("*") {
            return true;
        }
        match permission_class.split_once(':') {
            Some((model, _)) => holds(&format!("{model}:*")),
            None => false,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// `(class, public key)` pairs in a stable order.
    pub fn entries(&self) -> impl Iterator<Item = (&str, &[u8])> {
        self.entries
            .iter()
            .flat_map(|(class, keys)| keys.iter().map(move |k| (class.as_str(), k.as_slice())))
    }
}

pub fn check_registered(public_key: &[u8], permission_class: &str, registry: &KeyRegistry) -> bool {
    registry.is_registered(public_key, permission_class)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_class_membership() {
        let mut reg = KeyRegistry::new();
        reg.register("level:1", b"pk".to_vec());
        assert!(check_registered(b"pk", "level:1", &reg));
        assert!(!check_registered(b"pk", "level:2", &reg));
        assert!(!check_registered(b"other", "level:1", &reg));
    }

    #[test]
    fn empty_registry_knows_nothing() {
        let reg = KeyRegistry::new();
        for class in ["level:1", "*", "capabilities:TT", ""] {
            assert!(!check_registered(b"pk", class, &reg));
        }
    }

    #[test]
    fn wildcards() {
        let mut reg = KeyRegistry::new();
        reg.register("level:*", b"a".to_vec());
        reg.register("*", b"b".to_vec());
        assert!(reg.is_registered(b"a", "level:7"));
        assert!(!reg.is_registered(b"a", "sequence:g"));
        assert!(reg.is_registered(b"b", "sequence:g"));
        // A wildcard entry is not itself a permission class for other keys.
        assert!(!reg.is_registered(b"c", "level:*"));
    }
}
