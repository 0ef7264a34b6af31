//! SHA-256 content digests, the identity of every artifact the platform touches.

use std::fmt;
use std::str::FromStr;

use serde::de::{self, MapAccess, Visitor};
use serde::ser::SerializeMap;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use sha2::{Digest as _, Sha256};

/// Algorithm tag carried alongside every digest. Only SHA-256 exists.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default)]
pub enum DigestAlgorithm {
    #[default]
    Sha256,
}

impl DigestAlgorithm {
    pub const fn as_str(self) -> &'static str {
        match self {
            DigestAlgorithm::Sha256 => "sha256",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum DigestError {
    #[error("unsupported digest algorithm {0:?}")]
    UnsupportedAlgorithm(String),
    #[error("digest hex must be 64 lowercase hex characters, got {0:?}")]
    MalformedHex(String),
}

/// A SHA-256 digest rendered as 64 lowercase hex characters.
///
/// Serialized as an in-toto digest set, `{"sha256": "<hex>"}`. The textual
/// form used on the command line and in logs is `sha256:<hex>`.
#[derive(Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Digest {
    algorithm: DigestAlgorithm,
    hex: String,
}

impl Digest {
    pub fn from_hex(hex: &str) -> Result<Self, DigestError> {
        if is_valid_hex(hex) {
            Ok(Self {
                algorithm: DigestAlgorithm::Sha256,
                hex: hex.to_owned(),
            })
        } else {
            Err(DigestError::MalformedHex(hex.to_owned()))
        }
    }

    pub fn from_bytes(raw: [u8; 32]) -> Self {
        Self {
            algorithm: DigestAlgorithm::Sha256,
            hex: hex::encode(raw),
        }
    }

    pub fn algorithm(&self) -> DigestAlgorithm {
        self.algorithm
    }

    pub fn hex(&self) -> &str {
        &self.hex
    }

    /// Abbreviated form for messages, e.g. `ba7816bf…15ad`.
    pub fn short(&self) -> String {
        format!("{}…{}", &self.hex[..8], &self.hex[60..])
    }
}

/// `^[0-9a-f]{64}$`
pub fn is_valid_hex(hex: &str) -> bool {
    hex.len() == 64 && hex.bytes().all(|b| matches!(b, b'0'..=b'9' | b'a'..=b'f'))
}

/// SHA-256 of the exact byte sequence.
pub fn compute_digest(bytes: &[u8]) -> Digest {
    Digest::from_bytes(Sha256::digest(bytes).into())
}

impl fmt::Display for Digest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.algorithm.as_str(), self.hex)
    }
}

impl fmt::Debug for Digest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Digest({self})")
    }
}

impl FromStr for Digest {
    type Err = DigestError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.split_once(':') {
            Some(("sha256", hex)) => Digest::from_hex(hex),
            Some((alg, _)) => Err(DigestError::UnsupportedAlgorithm(alg.to_owned())),
            None => Digest::from_hex(s),
        }
    }
}

impl Serialize for Digest {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        let mut map = serializer.serialize_map(Some(1))?;
        map.serialize_entry(self.algorithm.as_str(), &self.hex)?;
        map.end()
    }
}

impl<'de> Deserialize<'de> for Digest {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        struct DigestSetVisitor;

        impl<'de> Visitor<'de> for DigestSetVisitor {
            type Value = Digest;

            fn expecting(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str("a digest set of the form {\"sha256\": \"<hex>\"}")
            }

            fn visit_map<A: MapAccess<'de>>(self, mut map: A) -> Result<Digest, A::Error> {
                let mut found: Option<Digest> = None;
                while let Some((alg, hex)) = map.next_entry::<String, String>()? {
                    if alg != "sha256" {
                        return Err(de::Error::custom(DigestError::UnsupportedAlgorithm(alg)));
                    }
                    if found.is_some() {
                        return Err(de::Error::duplicate_field("sha256"));
                    }
                    found = Some(Digest::from_hex(&hex).map_err(de::Error::custom)?);
                }
                found.ok_or_else(|| de::Error::missing_field("sha256"))
            }
        }

        deserializer.deserialize_map(DigestSetVisitor)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn known_vectors() {
        assert_eq!(
            compute_digest(b"").hex(),
            "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855"
        );
        assert_eq!(
            compute_digest(b"abc").hex(),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }

    #[test]
    fn repeated_hash_of_large_buffer_agrees() {
        use rand::{RngCore, SeedableRng};
        let mut buf = vec![0u8; 1 << 20];
        rand::rngs::StdRng::seed_from_u64(7).fill_bytes(&mut buf);
        assert_eq!(compute_digest(&buf), compute_digest(&buf));
    }

    #[test]
    fn hex_validation() {
        assert!(Digest::from_hex(&"a".repeat(64)).is_ok());
        assert!(Digest::from_hex(&"A".repeat(64)).is_err());
        assert!(Digest::from_hex(&"a".repeat(63)).is_err());
        assert!(Digest::from_hex(&"g".repeat(64)).is_err());
    }

    #[test]
    fn text_and_json_forms() {
        let d = compute_digest(b"abc");
        let text = d.to_string();
        assert!(text.starts_with("sha256:ba7816bf"));
        assert_eq!(text.parse::<Digest>().unwrap(), d);
        assert!("md5:abcd".parse::<Digest>().is_err());

        let json = serde_json::to_string(&d).unwrap();
        assert_eq!(json, format!("{{\"sha256\":\"{}\"}}", d.hex()));
        assert_eq!(serde_json::from_str::<Digest>(&json).unwrap(), d);
        assert!(serde_json::from_str::<Digest>(r#"{"sha512":"00"}"#).is_err());
        assert!(serde_json::from_str::<Digest>(r#"{}"#).is_err());
    }

    proptest! {
        #[test]
        fn single_bit_flip_changes_digest(
            data in proptest::collection::vec(any::<u8>(), 1..512),
            pos in any::<prop::sample::Index>(),
            bit in 0u8..8,
        ) {
            let mut mutated = data.clone();
            let i = pos.index(mutated.len());
            mutated[i] ^= 1 << bit;
            prop_assert_ne!(compute_digest(&data), compute_digest(&mutated));
        }
    }
}
