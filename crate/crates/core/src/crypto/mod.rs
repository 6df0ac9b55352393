//! Signature schemes, key registry and replay protection.
//!
//! Supported schemes:
//!
//! | scheme              | public key            | signature           |
//! |---------------------|-----------------------|---------------------|
//! | `rsa-pss-sha256`    | PKCS#1 DER, 2048 bit  | 256 bytes, salted   |
//! | `ecdsa-p256-sha256` | SEC1 compressed, 33 B | 64 bytes `r ‖ s`    |
//!
//! `dh` and `ecdh` are recognised tags but key agreement cannot sign, so every
//! operation on them fails with [`CryptoError::UnsupportedScheme`].

mod files;
mod nonce;
mod registry;

pub use files::{KeyFile, KeyFileError, RegistryFile, RegistryFileEntry};
pub use nonce::{check_and_record_nonce, NonceCache, NonceJournal, NONCE_LEN};
pub use registry::{check_registered, KeyRegistry};

use std::fmt;
use std::str::FromStr;

use p256::ecdsa::signature::{Signer, Verifier};
use rand::{CryptoRng, RngCore};
use rsa::pkcs1::{DecodeRsaPublicKey, EncodeRsaPublicKey};
use rsa::pkcs8::{DecodePrivateKey, EncodePrivateKey};
use rsa::signature::{RandomizedSigner, SignatureEncoding};
use serde::{Deserialize, Serialize};
use sha2::Sha256;

pub const RSA_BITS: usize = 2048;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum SchemeId {
    RsaPssSha256,
    EcdsaP256Sha256,
    Dh,
    Ecdh,
}

impl SchemeId {
    pub const ALL: [SchemeId; 4] = [
        SchemeId::RsaPssSha256,
        SchemeId::EcdsaP256Sha256,
        SchemeId::Dh,
        SchemeId::Ecdh,
    ];

    /// Wire tag used inside token payloads.
    pub fn tag(self) -> u8 {
        match self {
            SchemeId::RsaPssSha256 => 0x01,
            SchemeId::EcdsaP256Sha256 => 0x02,
            SchemeId::Dh => 0x10,
            SchemeId::Ecdh => 0x11,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        Self::ALL.into_iter().find(|s| s.tag() == tag)
    }

    pub fn name(self) -> &'static str {
        match self {
            SchemeId::RsaPssSha256 => "rsa-pss-sha256",
            SchemeId::EcdsaP256Sha256 => "ecdsa-p256-sha256",
            SchemeId::Dh => "dh",
            SchemeId::Ecdh => "ecdh",
        }
    }

    pub fn can_sign(self) -> bool {
        matches!(self, SchemeId::RsaPssSha256 | SchemeId::EcdsaP256Sha256)
    }
}

impl fmt::Display for SchemeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SchemeId {
    type Err = CryptoError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|id| id.name() == s)
            .ok_or_else(|| CryptoError::UnknownScheme(s.to_owned()))
    }
}

impl Serialize for SchemeId {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(self.name())
    }
}

impl<'de> Deserialize<'de> for SchemeId {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, thiserror::Error)]
pub enum CryptoError {
    #[error("scheme {0} cannot produce signatures")]
    UnsupportedScheme(SchemeId),
    #[error("unknown scheme {0:?}")]
    UnknownScheme(String),
    #[error("key generation failed: {0}")]
    KeyGeneration(String),
    #[error("signing failed: {0}")]
    SigningFailure(String),
    #[error("invalid {scheme} private key: {reason}")]
    InvalidPrivateKey { scheme: SchemeId, reason: String },
}

/// Public half of a key pair, tagged with its scheme.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct PublicKey {
    pub scheme: SchemeId,
    pub bytes: Vec<u8>,
}

#[derive(Clone)]
enum SecretKey {
    Rsa(Box<rsa::pss::BlindedSigningKey<Sha256>>),
    Ecdsa(p256::ecdsa::SigningKey),
}

/// A signing key together with its public key. The private half never
/// appears in tokens.
#[derive(Clone)]
pub struct KeyPair {
    public: PublicKey,
    secret: SecretKey,
}

impl fmt::Debug for KeyPair {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("KeyPair")
            .field("public", &self.public)
            .finish_non_exhaustive()
    }
}

impl KeyPair {
    pub fn scheme(&self) -> SchemeId {
        self.public.scheme
    }

    pub fn public_key(&self) -> &PublicKey {
        &self.public
    }

    /// PKCS#8 DER for RSA, the 32-byte scalar for P-256.
    pub fn private_key_bytes(&self) -> Vec<u8> {
        match &self.secret {
            SecretKey::Rsa(key) => AsRef::<rsa::RsaPrivateKey>::as_ref(key.as_ref())
                .to_pkcs8_der()
                .map(|doc| doc.as_bytes().to_vec())
                .expect("an in-memory RSA key always encodes"),
            SecretKey::Ecdsa(key) => key.to_bytes().to_vec(),
        }
    }

    pub fn from_private_key_bytes(scheme: SchemeId, bytes: &[u8]) -> Result<Self, CryptoError> {
        let invalid = |reason: String| CryptoError::InvalidPrivateKey { scheme, reason };
        match scheme {
            SchemeId::RsaPssSha256 => {
                let key = rsa::RsaPrivateKey::from_pkcs8_der(bytes)
                    .map_err(|e| invalid(e.to_string()))?;
                Ok(Self::from_rsa(key))
            }
            SchemeId::EcdsaP256Sha256 => {
                let key = p256::ecdsa::SigningKey::from_slice(bytes)
                    .map_err(|e| invalid(e.to_string()))?;
                Ok(Self::from_ecdsa(key))
            }
            other => Err(CryptoError::UnsupportedScheme(other)),
        }
    }

    fn from_rsa(key: rsa::RsaPrivateKey) -> Self {
        let bytes = key
            .to_public_key()
            .to_pkcs1_der()
            .map(|doc| doc.as_bytes().to_vec())
            .expect("an in-memory RSA key always encodes");
        Self {
            public: PublicKey {
                scheme: SchemeId::RsaPssSha256,
                bytes,
            },
            secret: SecretKey::Rsa(Box::new(rsa::pss::BlindedSigningKey::new(key))),
        }
    }

    fn from_ecdsa(key: p256::ecdsa::SigningKey) -> Self {
        let bytes = key
            .verifying_key()
            .to_encoded_point(true)
            .as_bytes()
            .to_vec();
        Self {
            public: PublicKey {
                scheme: SchemeId::EcdsaP256Sha256,
                bytes,
            },
            secret: SecretKey::Ecdsa(key),
        }
    }
}

pub fn generate_keypair(scheme: SchemeId) -> Result<KeyPair, CryptoError> {
    generate_keypair_with_rng(scheme, &mut rand::rngs::OsRng)
}

pub fn generate_keypair_with_rng<R: RngCore + CryptoRng>(
    scheme: SchemeId,
    rng: &mut R,
) -> Result<KeyPair, CryptoError> {
    match scheme {
        SchemeId::RsaPssSha256 => {
            let key = rsa::RsaPrivateKey::new(rng, RSA_BITS)
                .map_err(|e| CryptoError::KeyGeneration(e.to_string()))?;
            Ok(KeyPair::from_rsa(key))
        }
        SchemeId::EcdsaP256Sha256 => Ok(KeyPair::from_ecdsa(p256::ecdsa::SigningKey::random(rng))),
        other => Err(CryptoError::UnsupportedScheme(other)),
    }
}

/// Signs with fresh OS randomness (only RSA-PSS consumes it; ECDSA nonces
/// are derived deterministically).
pub fn sign(message: &[u8], key: &KeyPair) -> Result<Vec<u8>, CryptoError> {
    sign_with_rng(message, key, &mut rand::rngs::OsRng)
}

pub fn sign_with_rng<R: RngCore + CryptoRng>(
    message: &[u8],
    key: &KeyPair,
    rng: &mut R,
) -> Result<Vec<u8>, CryptoError> {
    match &key.secret {
        SecretKey::Rsa(secret) => {
            let sig = secret
                .try_sign_with_rng(rng, message)
                .map_err(|e| CryptoError::SigningFailure(e.to_string()))?;
            Ok(sig.to_vec())
        }
        SecretKey::Ecdsa(secret) => {
            let sig: p256::ecdsa::Signature = secret
                .try_sign(message)
                .map_err(|e| CryptoError::SigningFailure(e.to_string()))?;
            Ok(sig.to_bytes().to_vec())
        }
    }
}

/// True iff `signature` is valid for `message` under `public_key`.
/// Malformed keys or signatures yield `false`.
pub fn verify(message: &[u8], signature: &[u8], public_key: &PublicKey) -> bool {
    if signature.is_empty() {
        return false;
    }
    match public_key.scheme {
        SchemeId::RsaPssSha256 => {
            // from_pkcs1_der enforces the crate's modulus size ceiling, which
            // bounds the work an attacker-chosen key can cause.
            let Ok(key) = rsa::RsaPublicKey::from_pkcs1_der(&public_key.bytes) else {
                return false;
            };
            let Ok(sig) = rsa::pss::Signature::try_from(signature) else {
                return false;
            };
            rsa::pss::VerifyingKey::<Sha256>::new(key)
                .verify(message, &sig)
                .is_ok()
        }
        SchemeId::EcdsaP256Sha256 => {
            let Ok(key) = p256::ecdsa::VerifyingKey::from_sec1_bytes(&public_key.bytes) else {
                return false;
            };
            let Ok(sig) = p256::ecdsa::Signature::from_slice(signature) else {
                return false;
            };
            key.verify(message, &sig).is_ok()
        }
        SchemeId::Dh | SchemeId::Ecdh => false,
    }
}
