//! The platform's Ed25519 signing identity.

use std::fmt;
use std::path::Path;

use ed25519_dalek::pkcs8::spki::der::pem::LineEnding;
use ed25519_dalek::pkcs8::{DecodePrivateKey, DecodePublicKey, EncodePrivateKey, EncodePublicKey};
use ed25519_dalek::{Signature, Signer, SigningKey, Verifier, VerifyingKey};
use rand::{CryptoRng, RngCore};

use crate::digest::compute_digest;

#[derive(Debug, thiserror::Error)]
pub enum KeyError {
    #[error("cannot read key file {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid PEM key: {0}")]
    Pem(String),
}

/// An Ed25519 verification key plus its key id (hex SHA-256 of the 32 raw
/// public key bytes).
#[derive(Clone, PartialEq, Eq)]
pub struct PublicKey {
    key: VerifyingKey,
    key_id: String,
}

impl PublicKey {
    pub fn from_verifying_key(key: VerifyingKey) -> Self {
        let key_id = compute_digest(key.as_bytes()).hex().to_owned();
        Self { key, key_id }
    }

    pub fn key_id(&self) -> &str {
        &self.key_id
    }

    pub fn as_bytes(&self) -> &[u8; 32] {
        self.key.as_bytes()
    }

    pub fn verify(&self, message: &[u8], signature: &[u8]) -> bool {
        let Ok(sig) = Signature::from_slice(signature) else {
            return false;
        };
        self.key.verify(message, &sig).is_ok() && self.key.verify_strict(message, &sig).is_ok()
    }

    pub fn to_pem(&self) -> String {
        self.key
            .to_public_key_pem(LineEnding::LF)
            .expect("ed25519 public key always encodes")
    }

    pub fn from_pem(pem: &str) -> Result<Self, KeyError> {
        VerifyingKey::from_public_key_pem(pem.trim())
            .map(Self::from_verifying_key)
            .map_err(|e| KeyError::Pem(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, KeyError> {
        Self::from_pem(&read(path)?)
    }
}

impl fmt::Debug for PublicKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "PublicKey({})", self.key_id)
    }
}

/// Signing key and its public half. The private half is never serialized
/// into an artifact; it only leaves memory through [`KeyPair::private_pem`].
#[derive(Clone)]
pub struct KeyPair {
    signing: SigningKey,
    public: PublicKey,
}

impl KeyPair {
    pub fn generate<R: RngCore + CryptoRng>(rng: &mut R) -> Self {
        Self::from_signing_key(SigningKey::generate(rng))
    }

    /// Deterministic key from a 32-byte seed, for fixtures.
    pub fn from_seed(seed: [u8; 32]) -> Self {
        Self::from_signing_key(SigningKey::from_bytes(&seed))
    }

    fn from_signing_key(signing: SigningKey) -> Self {
        let public = PublicKey::from_verifying_key(signing.verifying_key());
        Self { signing, public }
    }

    pub fn key_id(&self) -> &str {
        self.public.key_id()
    }

    pub fn public_key(&self) -> &PublicKey {
        &self.public
    }

    pub fn sign(&self, message: &[u8]) -> [u8; 64] {
        self.signing.sign(message).to_bytes()
    }

    pub fn private_pem(&self) -> String {
        self.signing
            .to_pkcs8_pem(LineEnding::LF)
            .expect("ed25519 private key always encodes")
            .to_string()
    }

    pub fn from_private_pem(pem: &str) -> Result<Self, KeyError> {
        SigningKey::from_pkcs8_pem(pem.trim())
            .map(Self::from_signing_key)
            .map_err(|e| KeyError::Pem(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, KeyError> {
        Self::from_private_pem(&read(path)?)
    }

    /// Writes `<private>` and `<public>` PEM files.
    /// Writes both halves as PEM, creating parent directories. The private
    /// file is created with mode 0600 on Unix.
    pub fn save(&self, private_path: &Path, public_path: &Path) -> std::io::Result<()> {
        for p in [private_path, public_path] {
            if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                std::fs::create_dir_all(dir)?;
            }
        }
        let mut opts = std::fs::OpenOptions::new();
        opts.write(true).create(true).truncate(true);
        #[cfg(unix)]
        {
            use std::os::unix::fs::OpenOptionsExt;
            opts.mode(0o600);
        }
        std::io::Write::write_all(&mut opts.open(private_path)?, self.private_pem().as_bytes())?;
        std::fs::write(public_path, self.public.to_pem())
    }
}

impl fmt::Debug for KeyPair {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("KeyPair").field("key_id", &self.public.key_id).finish_non_exhaustive()
    }
}

fn read(path: &Path) -> Result<String, KeyError> {
    std::fs::read_to_string(path).map_err(|source| KeyError::Io {
        path: path.display().to_string(),
        source,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn key_id_is_digest_of_public_bytes() {
        let kp = KeyPair::from_seed([7; 32]);
        assert_eq!(kp.key_id(), compute_digest(kp.public_key().as_bytes()).hex());
    }

    #[test]
    fn pem_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let kp = KeyPair::generate(&mut rand::rngs::OsRng);
        let (sk, pk) = (dir.path().join("k.pem"), dir.path().join("k.pub.pem"));
        kp.save(&sk, &pk).unwrap();

        let loaded = KeyPair::load(&sk).unwrap();
        assert_eq!(loaded.key_id(), kp.key_id());
        let public = PublicKey::load(&pk).unwrap();
        assert_eq!(public, *kp.public_key());
        assert!(public.to_pem().starts_with("-----BEGIN PUBLIC KEY-----"));

        let sig = loaded.sign(b"msg");
        assert!(public.verify(b"msg", &sig));
        assert!(!public.verify(b"msh", &sig));
        assert!(!public.verify(b"msg", &sig[..63]));
    }

    #[test]
    fn bad_inputs() {
        assert!(matches!(
            KeyPair::load(Path::new("/nonexistent/key.pem")),
            Err(KeyError::Io { .. })
        ));
        assert!(matches!(PublicKey::from_pem("garbage"), Err(KeyError::Pem(_))));
    }
}
