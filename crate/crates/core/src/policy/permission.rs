use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{PolicyError, Registry};
use crate::ident::is_identifier;

/// The permission carried by a token.
///
/// Serialized in config files as `{ level = 2 }`, `{ capabilities = "TFFT" }`
/// or `{ sequence = "graph_id" }`.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Permission {
    /// Integer level, `1..=max_level`. Higher levels dominate lower ones.
    Level(u32),
    /// One bit per API, indexed by each API's capability index.
    Capabilities(CapabilityBits),
    /// Name of a sequence graph in the loaded registry.
    Sequence(String),
}

impl Permission {
    /// Identifier used to look up which keys may sign this permission:
    /// `level:<n>`, `capabilities:<TF…>` or `sequence:<graph id>`.
    pub fn class(&self) -> String {
        format!("{}:{}", self.model_name(), self.class_detail())
    }

    /// `level`, `capabilities` or `sequence`.
    pub fn model_name(&self) -> &'static str {
        match self {
            Permission::Level(_) => "level",
            Permission::Capabilities(_) => "capabilities",
            Permission::Sequence(_) => "sequence",
        }
    }

    fn class_detail(&self) -> String {
        match self {
            Permission::Level(level) => level.to_string(),
            Permission::Capabilities(bits) => bits.to_string(),
            Permission::Sequence(graph) => graph.clone(),
        }
    }

    /// Checks the invariants that only hold relative to a registry.
    pub fn validate(&self, registry: &Registry) -> Result<(), PolicyError> {
        match self {
            Permission::Level(level) => {
                if *level == 0 || *level > registry.max_level() {
                    return Err(PolicyError::InvalidPermission(format!(
                        "level {level} outside 1..={}",
                        registry.max_level()
                    )));
                }
            }
            Permission::Capabilities(bits) => {
                if bits.len() != registry.len() {
                    return Err(PolicyError::InvalidPermission(format!(
                        "capability vector has {} bits, registry declares {} apis",
                        bits.len(),
                        registry.len()
                    )));
                }
            }
            Permission::Sequence(graph) => {
                if registry.graph(graph).is_none() {
                    return Err(PolicyError::InvalidPermission(format!(
                        "unknown sequence graph {graph:?}"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Structural checks that do not need a registry.
    pub fn is_well_formed(&self) -> bool {
        match self {
            Permission::Level(level) => *level >= 1,
            Permission::Capabilities(_) => true,
            Permission::Sequence(graph) => is_identifier(graph),
        }
    }
}

impl fmt::Display for Permission {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.class())
    }
}

/// Ordered boolean vector, written as a string of `T`/`F`.
#[derive(Clone, Debug, Default, PartialEq, Eq, Hash)]
pub struct CapabilityBits(Vec<bool>);

impl CapabilityBits {
    pub fn new(bits: Vec<bool>) -> Self {
        Self(bits)
    }

    pub fn none(len: usize) -> Self {
        Self(vec![false; len])
    }

    pub fn all(len: usize) -> Self {
        Self(vec![true; len])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn get(&self, index: usize) -> Option<bool> {
        self.0.get(index).copied()
    }

    pub fn set(&mut self, index: usize, value: bool) {
        self.0[index] = value;
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.0
    }
}

impl fmt::Display for CapabilityBits {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for bit in &self.0 {
            f.write_str(if *bit { "T" } else { "F" })?;
        }
        Ok(())
    }
}

impl FromStr for CapabilityBits {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        s.chars()
            .map(|c| match c {
                'T' => Ok(true),
                'F' => Ok(false),
                other => Err(format!(
                    "invalid capability flag {other:?}, expected T or F"
                )),
            })
            .collect::<Result<Vec<_>, _>>()
            .map(Self)
    }
}

impl Serialize for CapabilityBits {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for CapabilityBits {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}
