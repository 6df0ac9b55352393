use std::fmt;

use base64::engine::general_purpose::URL_SAFE_NO_PAD;
use base64::Engine;

use super::{decode_payload, encode_payload, Mode, TokenError, TokenPayload};

pub const OPEN: &str = "<D>";
pub const CLOSE: &str = "</D>";

fn is_b64url(b: u8) -> bool {
    b.is_ascii_alphanumeric() || b == b'-' || b == b'_'
}

fn well_formed_interior(interior: &str) -> bool {
    let mut dots = 0;
    for b in interior.bytes() {
        if b == b'.' {
            dots += 1;
        } else if !is_b64url(b) {
            return false;
        }
    }
    dots == 1
}

/// Token text, `<D>payload.signature</D>`. Construction guarantees the
/// envelope invariants; the segments may still fail to decode.
#[derive(Clone, PartialEq, Eq, Hash)]
pub struct EncodedToken(String);

impl EncodedToken {
    pub fn parse(text: &str) -> Result<Self, TokenError> {
        let interior = text
            .strip_prefix(OPEN)
            .and_then(|t| t.strip_suffix(CLOSE))
            .ok_or_else(|| TokenError::MalformedToken("missing <D>…</D> delimiters".into()))?;
        if !well_formed_interior(interior) {
            return Err(TokenError::MalformedToken(
                "interior must be base64url segments joined by a single '.'".into(),
            ));
        }
        Ok(Self(text.to_owned()))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }

    fn interior(&self) -> &str {
        &self.0[OPEN.len()..self.0.len() - CLOSE.len()]
    }

    pub fn payload_segment(&self) -> &str {
        self.interior().split_once('.').map_or("", |(p, _)| p)
    }

    pub fn signature_segment(&self) -> &str {
        self.interior().split_once('.').map_or("", |(_, s)| s)
    }

    pub fn payload_bytes(&self) -> Result<Vec<u8>, TokenError> {
        URL_SAFE_NO_PAD
            .decode(self.payload_segment())
            .map_err(|e| TokenError::MalformedToken(format!("payload segment: {e}")))
    }

    pub fn signature_bytes(&self) -> Result<Vec<u8>, TokenError> {
        URL_SAFE_NO_PAD
            .decode(self.signature_segment())
            .map_err(|e| TokenError::MalformedToken(format!("signature segment: {e}")))
    }

    pub fn decode_payload(&self) -> Result<TokenPayload, TokenError> {
        decode_payload(&self.payload_bytes()?)
    }
}

impl fmt::Display for EncodedToken {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl fmt::Debug for EncodedToken {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "EncodedToken({})", self.0)
    }
}

/// Assembles `<D>` + payload + signature + `</D>`.
pub fn render_token(payload: &TokenPayload, signature: &[u8]) -> Result<EncodedToken, TokenError> {
    match (payload.mode(), signature.is_empty()) {
        (Mode::ServerVerified, false) | (Mode::OnDevice, true) => {}
        _ => return Err(TokenError::InvalidSignatureLength),
    }
    let bytes = encode_payload(payload)?;
    Ok(EncodedToken(format!(
        "{OPEN}{}.{}{CLOSE}",
        URL_SAFE_NO_PAD.encode(bytes),
        URL_SAFE_NO_PAD.encode(signature)
    )))
}

/// A user input split into prompt text and trailing token.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParsedInput {
    pub user_prompt: String,
    pub token: Option<EncodedToken>,
    /// The prompt text itself contains a delimiter. Such text is kept as
    /// plain prompt content and never parsed as a token.
    pub suspicious_delimiters: bool,
}

/// `user_prompt + token`.
pub fn compose(user_prompt: &str, token: &EncodedToken) -> String {
    let mut out = String::with_capacity(user_prompt.len() + token.as_str().len());
    out.push_str(user_prompt);
    out.push_str(token.as_str());
    out
}

/// Splits off the well-formed token block at the very end of `user_input`,
/// if there is one. Anything before it, including delimiter look-alikes,
/// is prompt text.
pub fn extract(user_input: &str) -> ParsedInput {
    let mut split = user_input.len();
    if let Some(body) = user_input.strip_suffix(CLOSE) {
        // base64url has no '<', so only the last opener can start a
        // well-formed block.
        if let Some(start) = body.rfind(OPEN) {
            if well_formed_interior(&body[start + OPEN.len()..]) {
                split = start;
            }
        }
    }
    let (prompt, token_text) = user_input.split_at(split);
    let token = (!token_text.is_empty()).then(|| EncodedToken(token_text.to_owned()));
    ParsedInput {
        user_prompt: prompt.to_owned(),
        token,
        suspicious_delimiters: prompt.contains(OPEN) || prompt.contains(CLOSE),
    }
}

#[cfg(test)]
mod tests {
    use super::super::codec::tests::arb_payload;
    use super::super::FORMAT_VERSION;
    use super::*;
    use crate::crypto::{PublicKey, SchemeId};
    use crate::policy::Permission;
    use proptest::prelude::*;

    fn on_device() -> TokenPayload {
        TokenPayload {
            version: FORMAT_VERSION,
            permission: Permission::Level(1),
            signer: None,
            prompt_hash: [0; 32],
            nonce: [3; 16],
            issued_at: 10,
            expires_at: 20,
        }
    }

    fn server() -> TokenPayload {
        TokenPayload {
            signer: Some(PublicKey {
                scheme: SchemeId::EcdsaP256Sha256,
                bytes: vec![2; 33],
            }),
            ..on_device()
        }
    }

    #[test]
    fn on_device_token_has_empty_signature() {
        let token = render_token(&on_device(), &[]).unwrap();
        assert!(token.as_str().ends_with(".</D>"));
        assert_eq!(token.signature_segment(), "");
        assert!(token.decode_payload().unwrap().signer.is_none());
    }

    #[test]
    fn server_token_is_delimited() {
        let token = render_token(&server(), &[1, 2, 3]).unwrap();
        assert!(token.as_str().starts_with("<D>"));
        assert!(token.as_str().ends_with("</D>"));
        assert_eq!(token.signature_bytes().unwrap(), vec![1, 2, 3]);
        assert_eq!(token.as_str().matches('.').count(), 1);
    }

    #[test]
    fn signature_presence_must_match_mode() {
        assert_eq!(
            render_token(&server(), &[]).unwrap_err(),
            TokenError::InvalidSignatureLength
        );
        assert_eq!(
            render_token(&on_device(), &[1]).unwrap_err(),
            TokenError::InvalidSignatureLength
        );
    }

    #[test]
    fn render_extract_decode() {
        let token = render_token(&server(), &[9; 64]).unwrap();
        let parsed = extract(&compose("hello", &token));
        assert_eq!(parsed.user_prompt, "hello");
        assert!(!parsed.suspicious_delimiters);
        assert_eq!(parsed.token.as_ref(), Some(&token));
        assert_eq!(parsed.token.unwrap().decode_payload().unwrap(), server());
    }

    #[test]
    fn no_token() {
        let parsed = extract("hello, no token");
        assert_eq!(parsed.user_prompt, "hello, no token");
        assert!(parsed.token.is_none());
        assert!(!parsed.suspicious_delimiters);
    }

    #[test]
    fn fake_delimiters_in_the_prompt_stay_text() {
        let token = render_token(&server(), &[9; 64]).unwrap();
        let prompt = "evil <D>fake</D> text";
        let parsed = extract(&compose(prompt, &token));
        assert_eq!(parsed.user_prompt, prompt);
        assert_eq!(parsed.token, Some(token));
        assert!(parsed.suspicious_delimiters);

        // A well-formed-looking block that is not the suffix is not a token.
        let inner = render_token(&server(), &[1; 64]).unwrap();
        let parsed = extract(&format!("{inner} trailing words"));
        assert!(parsed.token.is_none());
        assert!(parsed.suspicious_delimiters);
    }

    #[test]
    fn malformed_suffix_is_prompt_text() {
        for input in [
            "x<D>a.b.c</D>",
            "x<D>ab</D>",
            "x<D>a b.c</D>",
            "x</D>",
            "<D>.</D>x",
        ] {
            let parsed = extract(input);
            assert!(parsed.token.is_none(), "{input}");
            assert_eq!(parsed.user_prompt, input);
        }
        // Minimal well-formed envelope, even if it will not decode.
        let parsed = extract("x<D>.</D>");
        assert_eq!(parsed.user_prompt, "x");
        assert!(parsed.token.is_some());
    }

    #[test]
    fn parse_checks_envelope() {
        assert!(EncodedToken::parse("<D>abc.def</D>").is_ok());
        assert!(EncodedToken::parse("abc.def").is_err());
        assert!(EncodedToken::parse("<D>abc</D>").is_err());
        assert!(EncodedToken::parse("<D>a=.b</D>").is_err());
    }

    proptest! {
        #[test]
        fn round_trip_through_text(
            p in arb_payload(),
            prompt in "[^<]{0,60}",
            sig in proptest::collection::vec(any::<u8>(), 1..80),
        ) {
            let sig = if p.signer.is_some() { sig } else { Vec::new() };
            let token = render_token(&p, &sig).unwrap();
            let parsed = extract(&compose(&prompt, &token));
            prop_assert_eq!(&parsed.user_prompt, &prompt);
            let token = parsed.token.unwrap();
            prop_assert_eq!(token.decode_payload().unwrap(), p);
            prop_assert_eq!(token.signature_bytes().unwrap(), sig);
        }

        #[test]
        fn extracted_token_is_always_the_suffix(input in "(<D>|</D>|[a-zA-Z0-9._ -]){0,12}") {
            let parsed = extract(&input);
            match &parsed.token {
                Some(token) => {
                    prop_assert!(input.ends_with(token.as_str()));
                    prop_assert_eq!(format!("{}{}", parsed.user_prompt, token), input.clone());
                }
                None => prop_assert_eq!(&parsed.user_prompt, &input),
            }
        }
    }
}
