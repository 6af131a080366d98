//! Name-keyed factories for the pluggable backends: expert clients,
//! embedding sources, and neighbor engines. Each family registers its
//! built-in variants; configuration selects one by name at runtime.

use std::collections::BTreeMap;
use std::fmt;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum RegistryError {
    #[error("unknown {family} backend {name:?}; available: {available}")]
    Unknown {
        family: &'static str,
        name: String,
        available: String,
    },
    #[error("cannot build {family} backend {name:?}: {reason}")]
    Build {
        family: &'static str,
        name: String,
        reason: String,
    },
}

type Factory<T, S> = Box<dyn Fn(&S) -> Result<Box<T>, String> + Send + Sync>;

pub struct Registry<T: ?Sized, S> {
    family: &'static str,
    factories: BTreeMap<&'static str, Factory<T, S>>,
}

impl<T: ?Sized, S> Registry<T, S> {
    pub fn new(family: &'static str) -> Self {
        Registry {
            family,
            factories: BTreeMap::new(),
        }
    }

    /// Registers a factory under `name`, replacing any previous one.
    pub fn register<F>(&mut self, name: &'static str, factory: F) -> &mut Self
    where
        F: Fn(&S) -> Result<Box<T>, String> + Send + Sync + 'static,
    {
        self.factories.insert(name, Box::new(factory));
        self
    }

    pub fn names(&self) -> impl Iterator<Item = &'static str> + '_ {
        self.factories.keys().copied()
    }

    pub fn contains(&self, name: &str) -> bool {
        self.factories.contains_key(name)
    }

    pub fn build(&self, name: &str, settings: &S) -> Result<Box<T>, RegistryError> {
        let factory = self
            .factories
            .get(name)
            .ok_or_else(|| RegistryError::Unknown {
                family: self.family,
                name: name.to_string(),
                available: self.names().collect::<Vec<_>>().join(", "),
            })?;
        factory(settings).map_err(|reason| RegistryError::Build {
            family: self.family,
            name: name.to_string(),
            reason,
        })
    }
}

impl<T: ?Sized, S> fmt::Debug for Registry<T, S> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Registry")
            .field("family", &self.family)
            .field("names", &self.names().collect::<Vec<_>>())
            .finish()
    }
}
