use super::{TokenError, TokenPayload, FORMAT_VERSION, PROMPT_HASH_LEN};
use crate::crypto::{PublicKey, SchemeId, NONCE_LEN};
use crate::policy::{CapabilityBits, Permission};

const MODE_SERVER: u8 = 0x01;
const MODE_DEVICE: u8 = 0x02;

const PERM_LEVEL: u8 = 0x01;
const PERM_CAPABILITIES: u8 = 0x02;
const PERM_SEQUENCE: u8 = 0x03;

/// Canonical bytes for a payload. Deterministic and injective over valid
/// payloads.
pub fn encode_payload(payload: &TokenPayload) -> Result<Vec<u8>, TokenError> {
    if let Some(violation) = payload.invariant_violation() {
        return Err(TokenError::InvalidPayload(violation));
    }
    let mut buf = Vec::with_capacity(128);
    buf.push(payload.version);
    buf.push(match payload.signer {
        Some(_) => MODE_SERVER,
        None => MODE_DEVICE,
    });

    match &payload.permission {
        Permission::Level(level) => {
            buf.push(PERM_LEVEL);
            buf.extend_from_slice(&level.to_be_bytes());
        }
        Permission::Capabilities(bits) => {
            buf.push(PERM_CAPABILITIES);
            // Length checked by invariant_violation().
            buf.extend_from_slice(&(bits.len() as u16).to_be_bytes());
            let mut packed = vec![0u8; bits.len().div_ceil(8)];
            for (i, &bit) in bits.as_slice().iter().enumerate() {
                if bit {
                    packed[i / 8] |= 0x80 >> (i % 8);
                }
            }
            buf.extend_from_slice(&packed);
        }
        Permission::Sequence(graph) => {
            buf.push(PERM_SEQUENCE);
            buf.extend_from_slice(&(graph.len() as u16).to_be_bytes());
            buf.extend_from_slice(graph.as_bytes());
        }
    }

    if let Some(key) = &payload.signer {
        buf.push(key.scheme.tag());
        buf.extend_from_slice(&(key.bytes.len() as u16).to_be_bytes());
        buf.extend_from_slice(&key.bytes);
    }

    buf.extend_from_slice(&payload.prompt_hash);
    buf.extend_from_slice(&payload.nonce);
    buf.extend_from_slice(&payload.issued_at.to_be_bytes());
    buf.extend_from_slice(&payload.expires_at.to_be_bytes());
    Ok(buf)
}

struct Reader<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], TokenError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&end| end <= self.data.len())
            .ok_or_else(|| malformed(format!("truncated reading {what} at offset {}", self.pos)))?;
        let bytes = &self.data[self.pos..end];
        self.pos = end;
        Ok(bytes)
    }

    fn array<const N: usize>(&mut self, what: &str) -> Result<[u8; N], TokenError> {
        Ok(self
            .take(N, what)?
            .try_into()
            .expect("take returned N bytes"))
    }

    fn u8(&mut self, what: &str) -> Result<u8, TokenError> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16, TokenError> {
        Ok(u16::from_be_bytes(self.array(what)?))
    }

    fn u32(&mut self, what: &str) -> Result<u32, TokenError> {
        Ok(u32::from_be_bytes(self.array(what)?))
    }

    fn u64(&mut self, what: &str) -> Result<u64, TokenError> {
        Ok(u64::from_be_bytes(self.array(what)?))
    }
}

fn malformed(reason: impl Into<String>) -> TokenError {
    TokenError::MalformedPayload(reason.into())
}

/// Inverse of [`encode_payload`]. Rejects anything that is not exactly the
/// canonical encoding of a valid payload.
pub fn decode_payload(bytes: &[u8]) -> Result<TokenPayload, TokenError> {
    let mut r = Reader {
        data: bytes,
        pos: 0,
    };

    let version = r.u8("version")?;
    if version != FORMAT_VERSION {
        return Err(malformed(format!("unknown version {version}")));
    }
    let server_verified = match r.u8("mode")? {
        MODE_SERVER => true,
        MODE_DEVICE => false,
        other => return Err(malformed(format!("unknown mode 0x{other:02x}"))),
    };

    let permission = match r.u8("permission tag")? {
        PERM_LEVEL => Permission::Level(r.u32("level")?),
        PERM_CAPABILITIES => {
            let count = usize::from(r.u16("capability count")?);
            let packed = r.take(count.div_ceil(8), "capability bits")?;
            let bits: Vec<bool> = (0..count)
                .map(|i| packed[i / 8] & (0x80 >> (i % 8)) != 0)
                .collect();
            // Padding bits must be zero or two encodings would share a payload.
            if count % 8 != 0 {
                let used = count % 8;
                let pad_mask = 0xffu8 >> used;
                if packed[packed.len() - 1] & pad_mask != 0 {
                    return Err(malformed("nonzero capability padding bits"));
                }
            }
            Permission::Capabilities(CapabilityBits::new(bits))
        }
        PERM_SEQUENCE => {
            let len = usize::from(r.u16("graph id length")?);
            let raw = r.take(len, "graph id")?;
            let id = std::str::from_utf8(raw).map_err(|_| malformed("graph id is not UTF-8"))?;
            Permission::Sequence(id.to_owned())
        }
        other => return Err(malformed(format!("unknown permission tag 0x{other:02x}"))),
    };

    let signer = if server_verified {
        let tag = r.u8("scheme")?;
        let scheme = SchemeId::from_tag(tag)
            .ok_or_else(|| malformed(format!("unknown scheme tag 0x{tag:02x}")))?;
        let len = usize::from(r.u16("public key length")?);
        let bytes = r.take(len, "public key")?.to_vec();
        Some(PublicKey { scheme, bytes })
    } else {
        None
    };

    let payload = TokenPayload {
        version,
        permission,
        signer,
        prompt_hash: r.array::<PROMPT_HASH_LEN>("prompt hash")?,
        nonce: r.array::<NONCE_LEN>("nonce")?,
        issued_at: r.u64("issued_at")?,
        expires_at: r.u64("expires_at")?,
    };

    if r.pos != bytes.len() {
        return Err(malformed(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    if let Some(violation) = payload.invariant_violation() {
        return Err(malformed(violation));
    }
    Ok(payload)
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::collections::HashSet;

    pub(crate) fn arb_permission() -> impl Strategy<Value = Permission> {
        prop_oneof![
            (1u32..=u32::MAX).prop_map(Permission::Level),
            proptest::collection::vec(any::<bool>(), 0..40)
                .prop_map(|b| Permission::Capabilities(CapabilityBits::new(b))),
            "[A-Za-z0-9_.-]{1,24}".prop_map(Permission::Sequence),
        ]
    }

    pub(crate) fn arb_signer() -> impl Strategy<Value = Option<PublicKey>> {
        prop_oneof![
            Just(None),
            (
                prop_oneof![
                    Just(SchemeId::RsaPssSha256),
                    Just(SchemeId::EcdsaP256Sha256)
                ],
                proptest::collection::vec(any::<u8>(), 1..300)
            )
                .prop_map(|(scheme, bytes)| Some(PublicKey { scheme, bytes })),
        ]
    }

    pub(crate) fn arb_payload() -> impl Strategy<Value = TokenPayload> {
        (
            arb_permission(),
            arb_signer(),
            any::<[u8; 32]>(),
            any::<[u8; 16]>(),
            0u64..u64::MAX - 1,
            1u64..1_000_000,
        )
            .prop_map(|(permission, signer, prompt_hash, nonce, issued_at, ttl)| {
                TokenPayload {
                    version: FORMAT_VERSION,
                    permission,
                    signer,
                    prompt_hash,
                    nonce,
                    issued_at,
                    expires_at: issued_at.saturating_add(ttl).max(issued_at + 1),
                }
            })
    }

    fn sample() -> TokenPayload {
        TokenPayload {
            version: FORMAT_VERSION,
            permission: Permission::Level(1),
            signer: Some(PublicKey {
                scheme: SchemeId::EcdsaP256Sha256,
                bytes: vec![2; 33],
            }),
            prompt_hash: [9; 32],
            nonce: [1; 16],
            issued_at: 1_700_000_000,
            expires_at: 1_700_000_300,
        }
    }

    #[test]
    fn round_trip_sample() {
        let p = sample();
        assert_eq!(decode_payload(&encode_payload(&p).unwrap()).unwrap(), p);
    }

    #[test]
    fn fixed_layout() {
        let bytes = encode_payload(&sample()).unwrap();
        assert_eq!(&bytes[..7], &[1, MODE_SERVER, PERM_LEVEL, 0, 0, 0, 1]);
        assert_eq!(&bytes[7..10], &[0x02, 0, 33]);
        assert_eq!(bytes.len(), 3 + 4 + 3 + 33 + 32 + 16 + 8 + 8);
        let tail = &bytes[bytes.len() - 16..];
        assert_eq!(tail[..8], 1_700_000_000u64.to_be_bytes());
        assert_eq!(tail[8..], 1_700_000_300u64.to_be_bytes());
    }

    #[test]
    fn nonce_changes_encoding() {
        let a = sample();
        let b = TokenPayload {
            nonce: [2; 16],
            ..a.clone()
        };
        assert_ne!(encode_payload(&a).unwrap(), encode_payload(&b).unwrap());
    }

    #[test]
    fn capability_packing() {
        let p = TokenPayload {
            permission: Permission::Capabilities("TFFTTFFFT".parse().unwrap()),
            signer: None,
            ..sample()
        };
        let bytes = encode_payload(&p).unwrap();
        assert_eq!(
            &bytes[..7],
            &[1, MODE_DEVICE, PERM_CAPABILITIES, 0, 9, 0b1001_1000, 0x80]
        );
        assert_eq!(decode_payload(&bytes).unwrap(), p);

        let mut padded = bytes.clone();
        padded[6] |= 0x01;
        assert!(matches!(
            decode_payload(&padded),
            Err(TokenError::MalformedPayload(_))
        ));
    }

    #[test]
    fn degenerate_inputs_are_malformed() {
        assert!(matches!(
            decode_payload(&[]),
            Err(TokenError::MalformedPayload(_))
        ));
        let mut bytes = encode_payload(&sample()).unwrap();
        bytes.push(0);
        assert!(matches!(
            decode_payload(&bytes),
            Err(TokenError::MalformedPayload(_))
        ));
        bytes.truncate(bytes.len() - 2);
        assert!(matches!(
            decode_payload(&bytes),
            Err(TokenError::MalformedPayload(_))
        ));
    }

    #[test]
    fn unknown_version_fails_closed() {
        let mut bytes = encode_payload(&sample()).unwrap();
        bytes[0] = 2;
        let err = decode_payload(&bytes).unwrap_err();
        assert_eq!(
            err,
            TokenError::MalformedPayload("unknown version 2".into())
        );
    }

    #[test]
    fn invariants_enforced_both_ways() {
        let bad = TokenPayload {
            expires_at: 1_700_000_000,
            ..sample()
        };
        assert!(matches!(
            encode_payload(&bad),
            Err(TokenError::InvalidPayload(_))
        ));
        let zero = TokenPayload {
            permission: Permission::Level(0),
            ..sample()
        };
        assert!(matches!(
            encode_payload(&zero),
            Err(TokenError::InvalidPayload(_))
        ));

        // Forge the same violation at the byte level.
        let mut bytes = encode_payload(&sample()).unwrap();
        bytes[6] = 0;
        assert!(matches!(
            decode_payload(&bytes),
            Err(TokenError::MalformedPayload(_))
        ));

        let dh = TokenPayload {
            signer: Some(PublicKey {
                scheme: SchemeId::Dh,
                bytes: vec![1],
            }),
            ..sample()
        };
        assert!(encode_payload(&dh).is_err());
    }

    // Randomised oracle: 1000 generated payloads must each round-trip
    // field by field, and no two distinct payloads may share an encoding.
    #[test]
    fn thousand_random_payloads_round_trip_and_stay_distinct() {
        use proptest::strategy::ValueTree;
        use proptest::test_runner::{Config, TestRunner};

        let mut runner = TestRunner::new_with_rng(
            Config::default(),
            proptest::test_runner::TestRng::deterministic_rng(
                proptest::test_runner::RngAlgorithm::ChaCha,
            ),
        );
        let strategy = arb_payload();
        let mut seen_payloads = HashSet::new();
        let mut encodings = HashSet::new();
        for _ in 0..1000 {
            let p = strategy.new_tree(&mut runner).unwrap().current();
            let bytes = encode_payload(&p).unwrap();
            let back = decode_payload(&bytes).unwrap();
            assert_eq!(back.version, p.version);
            assert_eq!(back.permission, p.permission);
            assert_eq!(back.signer, p.signer);
            assert_eq!(back.prompt_hash, p.prompt_hash);
            assert_eq!(back.nonce, p.nonce);
            assert_eq!(back.issued_at, p.issued_at);
            assert_eq!(back.expires_at, p.expires_at);
            if seen_payloads.insert(format!("{p:?}")) {
                assert!(encodings.insert(bytes), "two payloads share an encoding");
            }
        }
        assert_eq!(seen_payloads.len(), encodings.len());
    }

    proptest! {
        #[test]
        fn encode_is_deterministic_and_decode_inverts(p in arb_payload()) {
            let a = encode_payload(&p).unwrap();
            let b = encode_payload(&p.clone()).unwrap();
            prop_assert_eq!(&a, &b);
            prop_assert_eq!(decode_payload(&a).unwrap(), p);
        }

        #[test]
        fn canonical_bytes_only(bytes in proptest::collection::vec(any::<u8>(), 0..200)) {
            // encode(decode(b)) = b whenever decode accepts b.
            if let Ok(p) = decode_payload(&bytes) {
                prop_assert_eq!(encode_payload(&p).unwrap(), bytes);
            }
        }

        #[test]
        fn appended_byte_is_rejected(p in arb_payload(), extra in any::<u8>()) {
            let mut bytes = encode_payload(&p).unwrap();
            bytes.push(extra);
            prop_assert!(decode_payload(&bytes).is_err());
        }
    }
}
