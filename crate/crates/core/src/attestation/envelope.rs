//! DSSE-style signature envelopes.
//!
//! The signature covers the pre-authentication encoding
//! `"DSSEv1" SP LEN(type) SP type SP LEN(body) SP body`, where LEN is the
//! ASCII decimal byte length, so a payload cannot be replayed under a
//! different payload type.

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use serde::{Deserialize, Serialize};

use super::keys::{KeyPair, PublicKey};
use super::link::{check_layout, LinkFile};
use crate::canonical::{self, CanonicalError};
use crate::report::VerificationReport;

pub const LINK_PAYLOAD_TYPE: &str = "application/vnd.aibomgen.link+json";
pub const AIBOM_PAYLOAD_TYPE: &str = "application/vnd.aibomgen.aibom+json";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EnvelopeSignature {
    #[serde(rename = "keyid")]
    pub key_id: String,
    /// Base64 (standard alphabet, padded).
    #[serde(rename = "sig")]
    pub signature: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct SignedEnvelope {
    pub payload_type: String,
    #[serde(with = "base64_bytes")]
    pub payload: Vec<u8>,
    pub signatures: Vec<EnvelopeSignature>,
}

mod base64_bytes {
    use super::*;
    use serde::{Deserializer, Serializer};

    pub fn serialize<S: Serializer>(bytes: &[u8], s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&STANDARD.encode(bytes))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<u8>, D::Error> {
        let text = String::deserialize(d)?;
        STANDARD.decode(text).map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, thiserror::Error)]
pub enum EnvelopeError {
    #[error("malformed envelope: {0}")]
    Malformed(#[from] serde_json::Error),
    #[error(transparent)]
    Canonical(#[from] CanonicalError),
}

/// Pre-authentication encoding of `(payload_type, payload)`.
pub fn pae(payload_type: &str, payload: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(payload.len() + payload_type.len() + 32);
    out.extend_from_slice(b"DSSEv1 ");
    out.extend_from_slice(payload_type.len().to_string().as_bytes());
    out.push(b' ');
    out.extend_from_slice(payload_type.as_bytes());
    out.push(b' ');
    out.extend_from_slice(payload.len().to_string().as_bytes());
    out.push(b' ');
    out.extend_from_slice(payload);
    out
}

/// Canonicalizes `doc` and signs it. Ed25519 is deterministic, so the same
/// document and key always yield the same envelope.
pub fn sign_envelope<T: Serialize + ?Sized>(
    doc: &T,
    payload_type: &str,
    key: &KeyPair,
) -> Result<SignedEnvelope, CanonicalError> {
    let payload = canonical::to_canonical_bytes(doc)?;
    let sig = key.sign(&pae(payload_type, &payload));
    Ok(SignedEnvelope {
        payload_type: payload_type.to_owned(),
        payload,
        signatures: vec![EnvelopeSignature {
            key_id: key.key_id().to_owned(),
            signature: STANDARD.encode(sig),
        }],
    })
}

impl SignedEnvelope {
    pub fn from_bytes(bytes: &[u8]) -> Result<Self, EnvelopeError> {
        Ok(serde_json::from_slice(bytes)?)
    }

    /// The stored form: canonical JSON of the envelope itself.
    pub fn to_bytes(&self) -> Vec<u8> {
        canonical::to_canonical_bytes(self).expect("envelopes hold only strings")
    }

    pub fn payload_json(&self) -> Result<serde_json::Value, CanonicalError> {
        canonical::parse(&self.payload)
    }

    /// Decodes the payload as a link file, without checking signatures.
    pub fn link(&self) -> Result<LinkFile, EnvelopeError> {
        Ok(serde_json::from_slice(&self.payload)?)
    }
}

/// Checks: `signature_valid`, `payload_canonical`, `schema_valid` and, for
/// link payloads, `layout_valid`.
pub fn verify_envelope(env: &SignedEnvelope, public_key: &PublicKey) -> VerificationReport {
    let mut report = VerificationReport::new();

    if env.signatures.is_empty() {
        report.fail("signature_valid", "no signatures");
    } else {
        let message = pae(&env.payload_type, &env.payload);
        let verified = env.signatures.iter().any(|s| {
            s.key_id == public_key.key_id()
                && STANDARD
                    .decode(&s.signature)
                    .map(|raw| public_key.verify(&message, &raw))
                    .unwrap_or(false)
        });
        if verified {
            report.pass("signature_valid");
        } else if env.signatures.iter().all(|s| s.key_id != public_key.key_id()) {
            report.fail("signature_valid", "no signature from the platform key");
        } else {
            report.fail("signature_valid", "signature does not verify");
        }
    }

    if canonical::is_canonical(&env.payload) {
        report.pass("payload_canonical");
    } else {
        report.fail("payload_canonical", "payload is not in canonical form");
    }

    match env.payload_type.as_str() {
        LINK_PAYLOAD_TYPE => match env.link() {
            Ok(link) => {
                report.pass("schema_valid");
                let problems = check_layout(&link);
                if problems.is_empty() {
                    report.pass("layout_valid");
                } else {
                    report.fail("layout_valid", problems.join("; "));
                }
            }
            Err(e) => {
                report.fail("schema_valid", e.to_string());
                report.fail("layout_valid", "payload is not a link");
            }
        },
        AIBOM_PAYLOAD_TYPE => match env.payload_json() {
            Ok(doc) => {
                let violations = crate::aibom::validate_schema(&doc);
                if violations.is_empty() {
                    report.pass("schema_valid");
                } else {
                    report.fail("schema_valid", violations.join("; "));
                }
            }
            Err(e) => report.fail("schema_valid", e.to_string()),
        },
        other => report.fail("schema_valid", format!("unknown payload type {other:?}")),
    }

    report
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    fn key(seed: u8) -> KeyPair {
        KeyPair::from_seed([seed; 32])
    }

    #[test]
    fn pae_layout() {
        assert_eq!(pae("t", b"hello"), b"DSSEv1 1 t 5 hello");
        assert_eq!(pae("", b""), b"DSSEv1 0  0 ");
    }

    #[test]
    fn aibom_type_round_trip() {
        // schema check fails on a non-AIBOM but the signature itself is fine
        let env = sign_envelope(&json!({"a": 1}), AIBOM_PAYLOAD_TYPE, &key(1)).unwrap();
        let report = verify_envelope(&env, key(1).public_key());
        assert_eq!(report.outcome("signature_valid"), Some(true));
        assert_eq!(report.outcome("payload_canonical"), Some(true));
        assert_eq!(report.outcome("schema_valid"), Some(false));
    }

    #[test]
    fn flipped_payload_byte_fails() {
        let mut env = sign_envelope(&json!({"a": 1}), "x/y", &key(1)).unwrap();
        env.payload[2] ^= 0x01;
        assert_eq!(verify_envelope(&env, key(1).public_key()).outcome("signature_valid"), Some(false));
    }

    #[test]
    fn wrong_key_fails() {
        let env = sign_envelope(&json!({"a": 1}), "x/y", &key(1)).unwrap();
        let report = verify_envelope(&env, key(2).public_key());
        assert!(!report.passed);
        assert_eq!(report.outcome("signature_valid"), Some(false));
    }

    #[test]
    fn empty_signature_list() {
        let mut env = sign_envelope(&json!({"a": 1}), "x/y", &key(1)).unwrap();
        env.signatures.clear();
        let report = verify_envelope(&env, key(1).public_key());
        let check = report.check("signature_valid").unwrap();
        assert!(!check.passed);
        assert_eq!(check.detail.as_deref(), Some("no signatures"));
    }

    #[test]
    fn reordered_payload_with_valid_signature_is_not_canonical() {
        let k = key(1);
        let payload = br#"{"b":1,"a":2}"#.to_vec();
        let sig = k.sign(&pae("x/y", &payload));
        let env = SignedEnvelope {
            payload_type: "x/y".into(),
            payload,
            signatures: vec![EnvelopeSignature {
                key_id: k.key_id().into(),
                signature: STANDARD.encode(sig),
            }],
        };
        let report = verify_envelope(&env, k.public_key());
        assert_eq!(report.outcome("signature_valid"), Some(true));
        assert_eq!(report.outcome("payload_canonical"), Some(false));
        assert!(!report.passed);
    }

    #[test]
    fn signing_is_deterministic_and_bytes_round_trip() {
        let doc = json!({"z": [1, 2], "a": "x"});
        let a = sign_envelope(&doc, "x/y", &key(3)).unwrap();
        let b = sign_envelope(&doc, "x/y", &key(3)).unwrap();
        assert_eq!(a, b);
        assert_eq!(SignedEnvelope::from_bytes(&a.to_bytes()).unwrap(), a);
        assert!(canonical::is_canonical(&a.to_bytes()));
    }

    #[test]
    fn payload_type_is_bound() {
        let k = key(1);
        let mut env = sign_envelope(&json!({"a": 1}), LINK_PAYLOAD_TYPE, &k).unwrap();
        env.payload_type = AIBOM_PAYLOAD_TYPE.into();
        assert_eq!(verify_envelope(&env, k.public_key()).outcome("signature_valid"), Some(false));
    }
}
