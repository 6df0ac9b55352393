//! Text formats for key material and the key registry.
//!
//! Key file (public or private, same shape):
//!
//! ```toml
//! scheme_id = "ecdsa-p256-sha256"
//! key = "<base64url, no padding>"
//! created_at = 1700000000
//! ```
//!
//! Registry file:
//!
//! ```toml
//! [[entries]]
//! permission_class = "level:1"
//! public_key = "<base64url, no padding>"
//! ```

use base64::engine::general_purpose::URL_SAFE_NO_PAD;
use base64::Engine;
use serde::{Deserialize, Serialize};

use super::{CryptoError, KeyPair, KeyRegistry, PublicKey, SchemeId};

#[derive(Debug, thiserror::Error)]
pub enum KeyFileError {
    #[error("parse error: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("key is not valid base64url: {0}")]
    Base64(#[from] base64::DecodeError),
    #[error(transparent)]
    Crypto(#[from] CryptoError),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KeyFile {
    pub scheme_id: SchemeId,
    pub key: String,
    pub created_at: u64,
}

impl KeyFile {
    pub fn public(key: &KeyPair, created_at: u64) -> Self {
        Self {
            scheme_id: key.scheme(),
            key: URL_SAFE_NO_PAD.encode(&key.public_key().bytes),
            created_at,
        }
    }

    pub fn private(key: &KeyPair, created_at: u64) -> Self {
        Self {
            scheme_id: key.scheme(),
            key: URL_SAFE_NO_PAD.encode(key.private_key_bytes()),
            created_at,
        }
    }

    pub fn parse(text: &str) -> Result<Self, KeyFileError> {
        Ok(toml::from_str(text)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("key file fields are plain scalars")
    }

    pub fn to_public_key(&self) -> Result<PublicKey, KeyFileError> {
        Ok(PublicKey {
            scheme: self.scheme_id,
            bytes: URL_SAFE_NO_PAD.decode(&self.key)?,
        })
    }

    pub fn to_keypair(&self) -> Result<KeyPair, KeyFileError> {
        let bytes = URL_SAFE_NO_PAD.decode(&self.key)?;
        Ok(KeyPair::from_private_key_bytes(self.scheme_id, &bytes)?)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegistryFileEntry {
    pub permission_class: String,
    pub public_key: String,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegistryFile {
    #[serde(default)]
    pub entries: Vec<RegistryFileEntry>,
}

impl RegistryFile {
    pub fn parse(text: &str) -> Result<Self, KeyFileError> {
        Ok(toml::from_str(text)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("registry entries are plain strings")
    }

    pub fn from_registry(registry: &KeyRegistry) -> Self {
        Self {
            entries: registry
                .entries()
                .map(|(class, key)| RegistryFileEntry {
                    permission_class: class.to_owned(),
                    public_key: URL_SAFE_NO_PAD.encode(key),
                })
                .collect(),
        }
    }

    pub fn to_registry(&self) -> Result<KeyRegistry, KeyFileError> {
        let mut registry = KeyRegistry::new();
        for entry in &self.entries {
            registry.register(
                entry.permission_class.clone(),
                URL_SAFE_NO_PAD.decode(&entry.public_key)?,
            );
        }
        Ok(registry)
    }
}
