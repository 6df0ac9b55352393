use std::fmt;

use serde::{Deserialize, Serialize};

use crate::crypto::{self, KeyRegistry, NonceCache};
use crate::policy::Registry;
use crate::token_format::{extract, prompt_digest, ParsedInput, TokenPayload};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VerificationOutcome {
    Valid,
    InvalidSignature,
    UnregisteredKey,
    Expired,
    ReplayedNonce,
    MissingToken,
    Malformed,
}

impl VerificationOutcome {
    pub const ALL: [VerificationOutcome; 7] = [
        VerificationOutcome::Valid,
        VerificationOutcome::InvalidSignature,
        VerificationOutcome::UnregisteredKey,
        VerificationOutcome::Expired,
        VerificationOutcome::ReplayedNonce,
        VerificationOutcome::MissingToken,
        VerificationOutcome::Malformed,
    ];

    pub fn is_valid(self) -> bool {
        self == VerificationOutcome::Valid
    }

    pub fn as_str(self) -> &'static str {
        match self {
            VerificationOutcome::Valid => "valid",
            VerificationOutcome::InvalidSignature => "invalid_signature",
            VerificationOutcome::UnregisteredKey => "unregistered_key",
            VerificationOutcome::Expired => "expired",
            VerificationOutcome::ReplayedNonce => "replayed_nonce",
            VerificationOutcome::MissingToken => "missing_token",
            VerificationOutcome::Malformed => "malformed",
        }
    }
}

impl fmt::Display for VerificationOutcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Everything the server needs to judge a token.
pub struct VerifyContext<'a> {
    pub registry: &'a Registry,
    pub keys: &'a KeyRegistry,
    pub nonces: &'a NonceCache,
    pub now: u64,
    /// Accept unsigned on-device tokens. Only for deployments where the
    /// model runs on the same device that minted the token.
    pub accept_on_device: bool,
}

#[derive(Clone, Debug)]
pub struct VerifiedInput {
    pub parsed: ParsedInput,
    pub outcome: VerificationOutcome,
    /// The decoded payload; present iff `outcome` is `Valid`.
    pub payload: Option<TokenPayload>,
}

/// Runs extraction, decoding, signature check, key registration,
/// permission validation, expiry, replay and prompt binding, in that order.
/// The first failure decides the outcome. The nonce is consumed once the checks before it pass.
pub fn verify_input(user_input: &str, ctx: &VerifyContext<'_>) -> VerifiedInput {
    let parsed = extract(user_input);
    let (outcome, payload) = judge(&parsed, ctx);
    VerifiedInput {
        parsed,
        outcome,
        payload: if outcome.is_valid() { payload } else { None },
    }
}

fn judge(
    parsed: &ParsedInput,
    ctx: &VerifyContext<'_>,
) -> (VerificationOutcome, Option<TokenPayload>) {
    use VerificationOutcome as V;

    let Some(token) = &parsed.token else {
        return (V::MissingToken, None);
    };
    let Ok(payload_bytes) = token.payload_bytes() else {
        return (V::Malformed, None);
    };
    let Ok(payload) = crate::token_format::decode_payload(&payload_bytes) else {
        return (V::Malformed, None);
    };
    let Ok(signature) = token.signature_bytes() else {
        return (V::Malformed, None);
    };

    match &payload.signer {
        Some(public_key) => {
            if !crypto::verify(&payload_bytes, &signature, public_key) {
                return (V::InvalidSignature, None);
            }
            if !ctx
                .keys
                .is_registered(&public_key.bytes, &payload.permission.class())
            {
                return (V::UnregisteredKey, None);
            }
        }
        None if ctx.accept_on_device => {}
        None => return (V::InvalidSignature, None),
    }
    // Checked after the signature so that a tampered permission reads as a
    // forgery rather than a formatting problem.
    if payload.permission.validate(ctx.registry).is_err() {
        return (V::Malformed, None);
    }

    if ctx.now >= payload.expires_at {
        return (V::Expired, None);
    }
    if !ctx
        .nonces
        .check_and_record(&payload.nonce, payload.expires_at, ctx.now)
    {
        return (V::ReplayedNonce, None);
    }
    // The signature covers this digest, so a mismatch means the token was
    // signed for some other prompt.
    if payload.prompt_hash != prompt_digest(&parsed.user_prompt) {
        return (V::InvalidSignature, None);
    }
    (V::Valid, Some(payload))
}
