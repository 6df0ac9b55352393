//! The token carried at the end of every user input.
//!
//! Text envelope (bit-exact):
//!
//! ```text
//! <D> base64url(payload) "." base64url(signature) </D>
//! ```
//!
//! base64url uses the URL-safe alphabet without padding. In on-device mode
//! the payload carries no public key and the signature segment is empty.
//!
//! Payload layout, version 1 (all integers big-endian):
//!
//! ```text
//! u8   version            = 1
//! u8   mode               0x01 server-verified, 0x02 on-device
//! u8   permission tag     0x01 level, 0x02 capabilities, 0x03 sequence
//!      level:             u32 level (>= 1)
//!      capabilities:      u16 bit count, ceil(n/8) bytes MSB-first, unused bits 0
//!      sequence:          u16 length, UTF-8 graph id
//! -- server-verified only --
//! u8   scheme tag
//! u16  public key length, then the key bytes (length >= 1)
//! --
//! [32] SHA-256 of the user prompt
//! [16] nonce
//! u64  issued_at
//! u64  expires_at         (> issued_at)
//! ```

mod codec;
mod envelope;

pub use codec::{decode_payload, encode_payload};
pub use envelope::{compose, extract, render_token, EncodedToken, ParsedInput, CLOSE, OPEN};

use sha2::{Digest, Sha256};

use crate::crypto::{PublicKey, NONCE_LEN};
use crate::policy::Permission;

pub const FORMAT_VERSION: u8 = 1;
pub const PROMPT_HASH_LEN: usize = 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Signed on the device, verified by the server.
    ServerVerified,
    /// The model runs on the device itself; no key, no signature.
    OnDevice,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenPayload {
    pub version: u8,
    pub permission: Permission,
    /// Present iff the token is server-verified.
    pub signer: Option<PublicKey>,
    pub prompt_hash: [u8; PROMPT_HASH_LEN],
    pub nonce: [u8; NONCE_LEN],
    pub issued_at: u64,
    pub expires_at: u64,
}

impl TokenPayload {
    pub fn mode(&self) -> Mode {
        if self.signer.is_some() {
            Mode::ServerVerified
        } else {
            Mode::OnDevice
        }
    }

    /// First violated invariant, if any.
    pub fn invariant_violation(&self) -> Option<String> {
        if self.version != FORMAT_VERSION {
            return Some(format!("unknown version {}", self.version));
        }
        if self.expires_at <= self.issued_at {
            return Some(format!(
                "expires_at {} is not after issued_at {}",
                self.expires_at, self.issued_at
            ));
        }
        if !self.permission.is_well_formed() {
            return Some(format!("malformed permission {}", self.permission));
        }
        match &self.permission {
            Permission::Capabilities(bits) if bits.len() > usize::from(u16::MAX) => {
                return Some("capability vector too long".into());
            }
            _ => {}
        }
        if let Some(key) = &self.signer {
            if !key.scheme.can_sign() {
                return Some(format!("scheme {} cannot sign", key.scheme));
            }
            if key.bytes.is_empty() || key.bytes.len() > usize::from(u16::MAX) {
                return Some(format!(
                    "public key length {} out of range",
                    key.bytes.len()
                ));
            }
        }
        None
    }
}

pub fn prompt_digest(user_prompt: &str) -> [u8; PROMPT_HASH_LEN] {
    Sha256::digest(user_prompt.as_bytes()).into()
}

#[derive(Clone, Debug, PartialEq, Eq, thiserror::Error)]
pub enum TokenError {
    #[error("invalid payload: {0}")]
    InvalidPayload(String),
    #[error("malformed payload: {0}")]
    MalformedPayload(String),
    #[error("signature must be empty iff the token is on-device")]
    InvalidSignatureLength,
    #[error("malformed token: {0}")]
    MalformedToken(String),
}
