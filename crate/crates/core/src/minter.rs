//! Device side: derive a permission from device status and append a token to
//! the prompt.
//!
//! Rules file schema (TOML), evaluated top to bottom, first match wins; the
//! last rule must have no conditions:
//!
//! ```toml
//! [[rules]]
//! grant = { level = 2 }
//! when = [
//!   { field = "seconds_since_auth", op = "le", value = 300 },
//!   { field = "location_class", op = "eq", value = "trusted" },
//! ]
//!
//! [[rules]]
//! grant = { level = 1 }
//! ```
//!
//! Fields: `seconds_since_auth` (integer; absent never matches), `account`
//! (string), `location_class` (`trusted` | `untrusted` | `unknown`),
//! `peer_device_ok` (bool). Ops: `eq`, `ne`, `lt`, `le`, `gt`, `ge`; ordering
//! ops apply to `seconds_since_auth` only.

use rand::{CryptoRng, RngCore};
use serde::{Deserialize, Serialize};

use crate::crypto::{self, CryptoError, KeyPair, NONCE_LEN};
use crate::policy::Permission;
use crate::token_format::{
    compose, encode_payload, prompt_digest, render_token, EncodedToken, Mode, TokenError,
    TokenPayload, FORMAT_VERSION,
};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LocationClass {
    Trusted,
    Untrusted,
    #[default]
    Unknown,
}

/// Device and user signals available when the prompt is submitted.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeviceStatus {
    /// Seconds since the last password or fingerprint entry.
    #[serde(default)]
    pub seconds_since_auth: Option<u64>,
    #[serde(default)]
    pub account: String,
    #[serde(default)]
    pub location_class: LocationClass,
    #[serde(default)]
    pub peer_device_ok: bool,
    /// Filled in from the minting clock when not given.
    #[serde(default)]
    pub now: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StatusField {
    SecondsSinceAuth,
    Account,
    LocationClass,
    PeerDeviceOk,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CompareOp {
    Eq,
    Ne,
    Lt,
    Le,
    Gt,
    Ge,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ConditionValue {
    Bool(bool),
    Int(u64),
    Text(String),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Condition {
    pub field: StatusField,
    pub op: CompareOp,
    pub value: ConditionValue,
}

impl Condition {
    fn check_types(&self) -> Result<(), String> {
        use ConditionValue as V;
        use StatusField as F;
        let ordering = !matches!(self.op, CompareOp::Eq | CompareOp::Ne);
        let ok = match (self.field, &self.value) {
            (F::SecondsSinceAuth, V::Int(_)) => true,
            (F::Account, V::Text(_)) => !ordering,
            (F::LocationClass, V::Text(t)) => {
                !ordering && matches!(t.as_str(), "trusted" | "untrusted" | "unknown")
            }
            (F::PeerDeviceOk, V::Bool(_)) => !ordering,
            _ => false,
        };
        if ok {
            Ok(())
        } else {
            Err(format!(
                "{:?} {:?} {:?} is not a valid comparison",
                self.field, self.op, self.value
            ))
        }
    }

    pub fn holds(&self, status: &DeviceStatus) -> bool {
        use ConditionValue as V;
        fn eq_ne<T: PartialEq>(op: CompareOp, a: T, b: T) -> bool {
            match op {
                CompareOp::Eq => a == b,
                CompareOp::Ne => a != b,
                _ => false,
            }
        }
        match (self.field, &self.value) {
            (StatusField::SecondsSinceAuth, V::Int(v)) => match status.seconds_since_auth {
                None => false,
                Some(s) => match self.op {
                    CompareOp::Eq => s == *v,
                    CompareOp::Ne => s != *v,
                    CompareOp::Lt => s < *v,
                    CompareOp::Le => s <= *v,
                    CompareOp::Gt => s > *v,
                    CompareOp::Ge => s >= *v,
                },
            },
            (StatusField::Account, V::Text(v)) => eq_ne(self.op, status.account.as_str(), v),
            (StatusField::LocationClass, V::Text(v)) => {
                let actual = match status.location_class {
                    LocationClass::Trusted => "trusted",
                    LocationClass::Untrusted => "untrusted",
                    LocationClass::Unknown => "unknown",
                };
                eq_ne(self.op, actual, v.as_str())
            }
            (StatusField::PeerDeviceOk, V::Bool(v)) => eq_ne(self.op, status.peer_device_ok, *v),
            _ => false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PermissionRule {
    #[serde(default)]
    pub when: Vec<Condition>,
    pub grant: Permission,
}

/// An ordered rule list ending in an unconditional default.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RuleSet {
    rules: Vec<PermissionRule>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawRules {
    rules: Vec<PermissionRule>,
}

impl RuleSet {
    pub fn new(rules: Vec<PermissionRule>) -> Result<Self, MintError> {
        match rules.last() {
            Some(last) if last.when.is_empty() => {}
            _ => return Err(MintError::NoDefaultRule),
        }
        for (i, rule) in rules.iter().enumerate() {
            if !rule.grant.is_well_formed() {
                return Err(MintError::InvalidRule {
                    index: i,
                    reason: format!("grant {} is malformed", rule.grant),
                });
            }
            for cond in &rule.when {
                cond.check_types()
                    .map_err(|reason| MintError::InvalidRule { index: i, reason })?;
            }
        }
        Ok(Self { rules })
    }

    pub fn parse(text: &str) -> Result<Self, MintError> {
        let raw: RawRules =
            toml::from_str(text).map_err(|e| MintError::RulesParse(e.to_string()))?;
        Self::new(raw.rules)
    }

    pub fn rules(&self) -> &[PermissionRule] {
        &self.rules
    }

    pub fn derive(&self, status: &DeviceStatus) -> Permission {
        derive_permission(&self.rules, status)
    }
}

/// Grant of the first rule whose conditions all hold.
///
/// Callers holding a [`RuleSet`] get the default-rule guarantee; on a raw
/// slice without a matching rule this panics.
pub fn derive_permission(rules: &[PermissionRule], status: &DeviceStatus) -> Permission {
    rules
        .iter()
        .find(|rule| rule.when.iter().all(|c| c.holds(status)))
        .map(|rule| rule.grant.clone())
        .expect("rule list ends with an unconditional default")
}

#[derive(Debug, thiserror::Error)]
pub enum MintError {
    #[error("rule list must end with a rule that has no conditions")]
    NoDefaultRule,
    #[error("rule {index}: {reason}")]
    InvalidRule { index: usize, reason: String },
    #[error("rules file: {0}")]
    RulesParse(String),
    #[error("ttl must be positive")]
    ZeroTtl,
    #[error("server-verified minting needs a signing key")]
    MissingKey,
    #[error(transparent)]
    Crypto(#[from] CryptoError),
    #[error(transparent)]
    Token(#[from] TokenError),
}

/// Mints tokens for one device key.
#[derive(Debug)]
pub struct Minter {
    key: Option<KeyPair>,
    mode: Mode,
    ttl: u64,
}

pub const DEFAULT_TTL: u64 = 300;

impl Minter {
    pub fn server_verified(key: KeyPair, ttl: u64) -> Result<Self, MintError> {
        if ttl == 0 {
            return Err(MintError::ZeroTtl);
        }
        if !key.scheme().can_sign() {
            return Err(CryptoError::UnsupportedScheme(key.scheme()).into());
        }
        Ok(Self {
            key: Some(key),
            mode: Mode::ServerVerified,
            ttl,
        })
    }

    pub fn on_device(ttl: u64) -> Result<Self, MintError> {
        if ttl == 0 {
            return Err(MintError::ZeroTtl);
        }
        Ok(Self {
            key: None,
            mode: Mode::OnDevice,
            ttl,
        })
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn key(&self) -> Option<&KeyPair> {
        self.key.as_ref()
    }

    /// Builds and signs a token for `user_prompt` without composing the
    /// final input.
    pub fn mint_token<R: RngCore + CryptoRng>(
        &self,
        user_prompt: &str,
        permission: Permission,
        now: u64,
        rng: &mut R,
    ) -> Result<(TokenPayload, EncodedToken), MintError> {
        let mut nonce = [0u8; NONCE_LEN];
        rng.fill_bytes(&mut nonce);
        let payload = TokenPayload {
            version: FORMAT_VERSION,
            permission,
            signer: self.key.as_ref().map(|k| k.public_key().clone()),
            prompt_hash: prompt_digest(user_prompt),
            nonce,
            issued_at: now,
            expires_at: now.saturating_add(self.ttl),
        };
        let signature = match (&self.key, self.mode) {
            (Some(key), Mode::ServerVerified) => {
                crypto::sign_with_rng(&encode_payload(&payload)?, key, rng)?
            }
            (None, Mode::OnDevice) => Vec::new(),
            _ => return Err(MintError::MissingKey),
        };
        let token = render_token(&payload, &signature)?;
        Ok((payload, token))
    }

    /// `user_prompt` with a freshly minted token appended.
    pub fn mint<R: RngCore + CryptoRng>(
        &self,
        user_prompt: &str,
        permission: Permission,
        now: u64,
        rng: &mut R,
    ) -> Result<String, MintError> {
        let (_, token) = self.mint_token(user_prompt, permission, now, rng)?;
        Ok(compose(user_prompt, &token))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crypto::{generate_keypair_with_rng, verify, SchemeId};
    use crate::token_format::extract;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    const DEMO_RULES: &str = include_str!("../fixtures/rules.toml");

    fn status(seconds_since_auth: Option<u64>, location: LocationClass) -> DeviceStatus {
        DeviceStatus {
            seconds_since_auth,
            account: "alice".into(),
            location_class: location,
            peer_device_ok: true,
            now: 0,
        }
    }

    fn minter() -> Minter {
        let mut rng = ChaCha20Rng::seed_from_u64(5);
        let key = generate_keypair_with_rng(SchemeId::EcdsaP256Sha256, &mut rng).unwrap();
        Minter::server_verified(key, DEFAULT_TTL).unwrap()
    }

    #[test]
    fn stale_auth_gets_low_level() {
        let rules = RuleSet::parse(DEMO_RULES).unwrap();
        assert_eq!(
            rules.derive(&status(Some(400), LocationClass::Trusted)),
            Permission::Level(1)
        );
    }

    #[test]
    fn recent_auth_gets_high_level() {
        let rules = RuleSet::parse(DEMO_RULES).unwrap();
        assert_eq!(
            rules.derive(&status(Some(60), LocationClass::Trusted)),
            Permission::Level(2)
        );
        // Recency alone is not enough away from a trusted location.
        assert_eq!(
            rules.derive(&status(Some(60), LocationClass::Untrusted)),
            Permission::Level(1)
        );
        assert_eq!(
            rules.derive(&status(Some(300), LocationClass::Trusted)),
            Permission::Level(2)
        );
        assert_eq!(
            rules.derive(&status(None, LocationClass::Trusted)),
            Permission::Level(1)
        );
    }

    #[test]
    fn default_only() {
        let rules = RuleSet::new(vec![PermissionRule {
            when: vec![],
            grant: Permission::Level(3),
        }])
        .unwrap();
        for s in [
            status(None, LocationClass::Unknown),
            status(Some(0), LocationClass::Trusted),
        ] {
            assert_eq!(rules.derive(&s), Permission::Level(3));
        }
    }

    #[test]
    fn rule_validation() {
        assert!(matches!(
            RuleSet::new(vec![]),
            Err(MintError::NoDefaultRule)
        ));
        let conditional = PermissionRule {
            when: vec![Condition {
                field: StatusField::PeerDeviceOk,
                op: CompareOp::Eq,
                value: ConditionValue::Bool(true),
            }],
            grant: Permission::Level(1),
        };
        assert!(matches!(
            RuleSet::new(vec![conditional.clone()]),
            Err(MintError::NoDefaultRule)
        ));
        let bad = PermissionRule {
            when: vec![Condition {
                field: StatusField::Account,
                op: CompareOp::Lt,
                value: ConditionValue::Text("a".into()),
            }],
            grant: Permission::Level(1),
        };
        let default = PermissionRule {
            when: vec![],
            grant: Permission::Level(1),
        };
        assert!(matches!(
            RuleSet::new(vec![bad, default.clone()]),
            Err(MintError::InvalidRule { index: 0, .. })
        ));
        let zero = PermissionRule {
            when: vec![],
            grant: Permission::Level(0),
        };
        assert!(RuleSet::new(vec![zero]).is_err());
    }

    #[test]
    fn other_fields() {
        let cond = |field, op, value| Condition { field, op, value };
        let s = status(Some(10), LocationClass::Untrusted);
        assert!(cond(
            StatusField::Account,
            CompareOp::Eq,
            ConditionValue::Text("alice".into())
        )
        .holds(&s));
        assert!(cond(
            StatusField::Account,
            CompareOp::Ne,
            ConditionValue::Text("bob".into())
        )
        .holds(&s));
        assert!(cond(
            StatusField::PeerDeviceOk,
            CompareOp::Eq,
            ConditionValue::Bool(true)
        )
        .holds(&s));
        assert!(cond(
            StatusField::LocationClass,
            CompareOp::Ne,
            ConditionValue::Text("trusted".into())
        )
        .holds(&s));
        assert!(cond(
            StatusField::SecondsSinceAuth,
            CompareOp::Gt,
            ConditionValue::Int(5)
        )
        .holds(&s));
        assert!(!cond(
            StatusField::SecondsSinceAuth,
            CompareOp::Ge,
            ConditionValue::Int(11)
        )
        .holds(&s));
    }

    #[test]
    fn minted_token_is_signed_over_the_payload() {
        let m = minter();
        let mut rng = ChaCha20Rng::seed_from_u64(9);
        let input = m
            .mint("hello", Permission::Level(1), 1_000, &mut rng)
            .unwrap();
        let parsed = extract(&input);
        assert_eq!(parsed.user_prompt, "hello");
        let token = parsed.token.unwrap();
        let payload = token.decode_payload().unwrap();
        assert_eq!(payload.issued_at, 1_000);
        assert_eq!(payload.expires_at, 1_000 + DEFAULT_TTL);
        assert_eq!(payload.prompt_hash, prompt_digest("hello"));
        assert_eq!(payload.signer.as_ref(), Some(m.key().unwrap().public_key()));
        assert!(verify(
            &token.payload_bytes().unwrap(),
            &token.signature_bytes().unwrap(),
            m.key().unwrap().public_key()
        ));
    }

    #[test]
    fn two_mints_use_distinct_nonces() {
        let m = minter();
        let mut rng = ChaCha20Rng::seed_from_u64(9);
        let (a, _) = m
            .mint_token("p", Permission::Level(1), 0, &mut rng)
            .unwrap();
        let (b, _) = m
            .mint_token("p", Permission::Level(1), 0, &mut rng)
            .unwrap();
        assert_ne!(a.nonce, b.nonce);
    }

    #[test]
    fn on_device_mint_has_no_key_or_signature() {
        let m = Minter::on_device(60).unwrap();
        let input = m
            .mint(
                "local",
                Permission::Level(2),
                5,
                &mut ChaCha20Rng::seed_from_u64(1),
            )
            .unwrap();
        let token = extract(&input).token.unwrap();
        assert_eq!(token.signature_segment(), "");
        let payload = token.decode_payload().unwrap();
        assert!(payload.signer.is_none());
        assert_eq!(payload.mode(), Mode::OnDevice);
    }

    #[test]
    fn zero_ttl_is_rejected() {
        assert!(matches!(Minter::on_device(0), Err(MintError::ZeroTtl)));
    }
}
