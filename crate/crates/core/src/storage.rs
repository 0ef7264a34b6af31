//! Content-addressed, write-once artifact storage with time-limited read
//! grants.
//!
//! Layout under the root directory:
//!
//! ```text
//! objects/<namespace>/<name>   object bytes
//! index/<namespace>.json       owner + name -> {digest, size, media type}
//! ```
//!
//! Every object write and its index update happen under one lock with
//! write-temp-then-rename, so a reader never observes an index entry whose
//! object is missing.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, RwLock};

use base64::engine::general_purpose::URL_SAFE_NO_PAD;
use base64::Engine;
use chrono::{DateTime, Duration, Utc};
use hmac::{Hmac, Mac};
use serde::{Deserialize, Serialize};
use sha2::Sha256;

use crate::aibom::ArtifactResolver;
use crate::canonical;
use crate::clock::{Clock, SystemClock};
use crate::digest::{compute_digest, Digest};
use crate::model::{media_type_for, normalize_name, ArtifactRef};

/// Owner of namespaces the platform writes for itself (scan reports).
pub const PLATFORM_PRINCIPAL: &str = "platform";

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ObjectKey {
    /// Job id, upload id, or a platform namespace.
    pub namespace: String,
    pub name: String,
}

impl ObjectKey {
    pub fn new(namespace: &str, name: &str) -> Result<Self, StorageError> {
        validate_namespace(namespace)?;
        let name = normalize_name(name).map_err(|e| StorageError::InvalidKey(e.to_string()))?;
        Ok(Self {
            namespace: namespace.to_owned(),
            name,
        })
    }

    pub fn of(artifact: &ArtifactRef) -> Result<Self, StorageError> {
        let ns = artifact
            .namespace
            .as_deref()
            .ok_or_else(|| StorageError::InvalidKey(format!("{} has no namespace", artifact.name)))?;
        Self::new(ns, &artifact.name)
    }
}

impl fmt::Display for ObjectKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.namespace, self.name)
    }
}

fn validate_namespace(ns: &str) -> Result<(), StorageError> {
    let ok = !ns.is_empty()
        && !ns.starts_with('.')
        && ns.len() <= 128
        && ns.bytes().all(|b| b.is_ascii_alphanumeric() || matches!(b, b'-' | b'_' | b'.'));
    if ok {
        Ok(())
    } else {
        Err(StorageError::InvalidKey(format!("bad namespace {ns:?}")))
    }
}

#[derive(Debug, thiserror::Error)]
pub enum StorageError {
    #[error("object {0} not found")]
    NotFound(ObjectKey),
    #[error("namespace {0} does not exist")]
    UnknownNamespace(String),
    #[error("namespace {0} already belongs to another principal")]
    NamespaceTaken(String),
    #[error("object {0} already exists with different content")]
    ImmutabilityViolation(ObjectKey),
    #[error("storage full: {used} + {requested} bytes exceeds capacity {capacity}")]
    StorageFull { used: u64, requested: u64, capacity: u64 },
    #[error("object {key} is corrupt: recorded {expected}, stored bytes hash to {actual}")]
    IntegrityError { key: ObjectKey, expected: Digest, actual: Digest },
    #[error("principal does not own {0}")]
    NotOwner(String),
    #[error("access grant expired")]
    GrantExpired,
    #[error("access grant token is invalid")]
    InvalidToken,
    #[error("invalid object key: {0}")]
    InvalidKey(String),
    #[error("storage I/O error: {0}")]
    Io(#[from] std::io::Error),
    #[error("corrupt index for namespace {0}")]
    CorruptIndex(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
struct IndexEntry {
    digest: Digest,
    size_bytes: u64,
    media_type: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
struct NamespaceIndex {
    owner: String,
    objects: BTreeMap<String, IndexEntry>,
}

/// A presigned read grant for one object.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AccessGrant {
    pub key: ObjectKey,
    pub expires_at: DateTime<Utc>,
    pub token: String,
}

impl AccessGrant {
    /// Download path relative to the gateway root:
    /// `/v1/objects/<namespace>/<name>?expires=<unix>&token=<mac>`.
    pub fn url_path(&self) -> String {
        format!(
            "/v1/objects/{}/{}?expires={}&token={}",
            self.key.namespace,
            self.key.name,
            self.expires_at.timestamp(),
            self.token
        )
    }

    pub fn from_parts(namespace: &str, name: &str, expires_unix: i64, token: &str) -> Result<Self, StorageError> {
        let expires_at = DateTime::from_timestamp(expires_unix, 0).ok_or(StorageError::InvalidToken)?;
        Ok(Self {
            key: ObjectKey::new(namespace, name)?,
            expires_at,
            token: token.to_owned(),
        })
    }
}

pub struct StorageConfig {
    pub root: PathBuf,
    /// HMAC key for access grants.
    pub grant_secret: Vec<u8>,
    pub capacity_bytes: Option<u64>,
    /// fsync objects before renaming them into place.
    pub sync_writes: bool,
}

impl StorageConfig {
    pub fn new(root: impl Into<PathBuf>, grant_secret: impl Into<Vec<u8>>) -> Self {
        Self {
            root: root.into(),
            grant_secret: grant_secret.into(),
            capacity_bytes: None,
            sync_writes: true,
        }
    }
}

pub struct Storage {
    root: PathBuf,
    secret: Vec<u8>,
    capacity: Option<u64>,
    sync_writes: bool,
    clock: Arc<dyn Clock>,
    indexes: RwLock<HashMap<String, NamespaceIndex>>,
    write_lock: Mutex<()>,
}

type HmacSha256 = Hmac<Sha256>;

impl Storage {
    pub fn open(config: StorageConfig) -> Result<Self, StorageError> {
        Self::open_with_clock(config, Arc::new(SystemClock))
    }

    pub fn open_with_clock(config: StorageConfig, clock: Arc<dyn Clock>) -> Result<Self, StorageError> {
        fs::create_dir_all(config.root.join("objects"))?;
        fs::create_dir_all(config.root.join("index"))?;
        let mut indexes = HashMap::new();
        for entry in fs::read_dir(config.root.join("index"))? {
            let path = entry?.path();
            if path.extension().and_then(|e| e.to_str()) != Some("json") {
                continue;
            }
            let ns = path.file_stem().and_then(|s| s.to_str()).unwrap_or_default().to_owned();
            let index: NamespaceIndex =
                serde_json::from_slice(&fs::read(&path)?).map_err(|_| StorageError::CorruptIndex(ns.clone()))?;
            indexes.insert(ns, index);
        }
        Ok(Self {
            root: config.root,
            secret: config.grant_secret,
            capacity: config.capacity_bytes,
            sync_writes: config.sync_writes,
            clock,
            indexes: RwLock::new(indexes),
            write_lock: Mutex::new(()),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    /// Backing file of an object. Exposed for out-of-band tamper tests.
    pub fn object_path(&self, key: &ObjectKey) -> PathBuf {
        let mut p = self.root.join("objects").join(&key.namespace);
        for seg in key.name.split('/') {
            p.push(seg);
        }
        p
    }

    fn index_path(&self, namespace: &str) -> PathBuf {
        self.root.join("index").join(format!("{namespace}.json"))
    }

    /// Registers `namespace` as owned by `owner`. Idempotent for the same owner.
    pub fn create_namespace(&self, namespace: &str, owner: &str) -> Result<(), StorageError> {
        validate_namespace(namespace)?;
        let _guard = self.write_lock.lock().unwrap();
        if let Some(existing) = self.indexes.read().unwrap().get(namespace) {
            return if existing.owner == owner {
                Ok(())
            } else {
                Err(StorageError::NamespaceTaken(namespace.to_owned()))
            };
        }
        let index = NamespaceIndex {
            owner: owner.to_owned(),
            objects: BTreeMap::new(),
        };
        self.write_index(namespace, &index)?;
        self.indexes.write().unwrap().insert(namespace.to_owned(), index);
        Ok(())
    }

    pub fn owner(&self, namespace: &str) -> Option<String> {
        self.indexes.read().unwrap().get(namespace).map(|i| i.owner.clone())
    }

    pub fn used_bytes(&self) -> u64 {
        self.indexes
            .read()
            .unwrap()
            .values()
            .flat_map(|i| i.objects.values())
            .map(|e| e.size_bytes)
            .sum()
    }

    /// Stores `bytes` under `key`. Re-putting identical bytes is a no-op;
    /// different bytes are refused.
    pub fn put_object(&self, key: &ObjectKey, bytes: &[u8]) -> Result<ArtifactRef, StorageError> {
        let digest = compute_digest(bytes);
        let _guard = self.write_lock.lock().unwrap();

        let mut index = self
            .indexes
            .read()
            .unwrap()
            .get(&key.namespace)
            .cloned()
            .ok_or_else(|| StorageError::UnknownNamespace(key.namespace.clone()))?;
        if let Some(existing) = index.objects.get(&key.name) {
            return if existing.digest == digest {
                Ok(self.artifact_ref(key, existing))
            } else {
                Err(StorageError::ImmutabilityViolation(key.clone()))
            };
        }
        if let Some(capacity) = self.capacity {
            let used = self.used_bytes();
            if used + bytes.len() as u64 > capacity {
                return Err(StorageError::StorageFull {
                    used,
                    requested: bytes.len() as u64,
                    capacity,
                });
            }
        }

        let path = self.object_path(key);
        self.write_atomic(&path, bytes)?;
        let entry = IndexEntry {
            digest,
            size_bytes: bytes.len() as u64,
            media_type: media_type_for(&key.name).to_owned(),
        };
        index.objects.insert(key.name.clone(), entry.clone());
        self.write_index(&key.namespace, &index)?;
        self.indexes.write().unwrap().insert(key.namespace.clone(), index);
        Ok(self.artifact_ref(key, &entry))
    }

    fn artifact_ref(&self, key: &ObjectKey, entry: &IndexEntry) -> ArtifactRef {
        ArtifactRef::new(&key.name, entry.digest.clone(), entry.size_bytes, &entry.media_type)
            .in_namespace(&key.namespace)
    }

    pub fn stat(&self, key: &ObjectKey) -> Option<ArtifactRef> {
        let indexes = self.indexes.read().unwrap();
        let entry = indexes.get(&key.namespace)?.objects.get(&key.name)?;
        Some(self.artifact_ref(key, entry))
    }

    pub fn list(&self, namespace: &str) -> Vec<ArtifactRef> {
        let indexes = self.indexes.read().unwrap();
        let Some(index) = indexes.get(namespace) else {
            return Vec::new();
        };
        index
            .objects
            .iter()
            .map(|(name, entry)| {
                ArtifactRef::new(name, entry.digest.clone(), entry.size_bytes, &entry.media_type)
                    .in_namespace(namespace)
            })
            .collect()
    }

    /// Returns the stored bytes after re-hashing them against the index.
    pub fn get_object(&self, key: &ObjectKey) -> Result<Vec<u8>, StorageError> {
        let expected = self
            .stat(key)
            .ok_or_else(|| StorageError::NotFound(key.clone()))?
            .digest;
        let bytes = match fs::read(self.object_path(key)) {
            Ok(b) => b,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
                return Err(StorageError::IntegrityError {
                    key: key.clone(),
                    expected,
                    actual: compute_digest(b""),
                })
            }
            Err(e) => return Err(e.into()),
        };
        let actual = compute_digest(&bytes);
        if actual != expected {
            return Err(StorageError::IntegrityError {
                key: key.clone(),
                expected,
                actual,
            });
        }
        Ok(bytes)
    }

    /// Bytes currently on disk for an indexed object, without the digest check.
    pub fn read_raw(&self, key: &ObjectKey) -> Result<Option<Vec<u8>>, StorageError> {
        if self.stat(key).is_none() {
            return Ok(None);
        }
        match fs::read(self.object_path(key)) {
            Ok(b) => Ok(Some(b)),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(e.into()),
        }
    }

    fn grant_mac(&self, key: &ObjectKey, expires_unix: i64) -> HmacSha256 {
        let mut mac = HmacSha256::new_from_slice(&self.secret).expect("HMAC accepts any key length");
        mac.update(b"aibomgen-grant-v1\n");
        mac.update(key.namespace.as_bytes());
        mac.update(b"\n");
        mac.update(key.name.as_bytes());
        mac.update(b"\n");
        mac.update(expires_unix.to_string().as_bytes());
        mac
    }

    pub fn issue_grant(&self, key: &ObjectKey, ttl_seconds: u64, principal: &str) -> Result<AccessGrant, StorageError> {
        let owner = self
            .owner(&key.namespace)
            .ok_or_else(|| StorageError::NotFound(key.clone()))?;
        if owner != principal {
            return Err(StorageError::NotOwner(key.to_string()));
        }
        if self.stat(key).is_none() {
            return Err(StorageError::NotFound(key.clone()));
        }
        let ttl = Duration::seconds(i64::try_from(ttl_seconds.max(1)).unwrap_or(i64::MAX / 2));
        // Grant expiry has one-second resolution.
        let expires_unix = (self.clock.now() + ttl).timestamp();
        let token = URL_SAFE_NO_PAD.encode(self.grant_mac(key, expires_unix).finalize().into_bytes());
        Ok(AccessGrant {
            key: key.clone(),
            expires_at: DateTime::from_timestamp(expires_unix, 0).expect("valid timestamp"),
            token,
        })
    }

    pub fn redeem_grant(&self, grant: &AccessGrant) -> Result<Vec<u8>, StorageError> {
        let expires_unix = grant.expires_at.timestamp();
        let raw = URL_SAFE_NO_PAD
            .decode(&grant.token)
            .map_err(|_| StorageError::InvalidToken)?;
        self.grant_mac(&grant.key, expires_unix)
            .verify_slice(&raw)
            .map_err(|_| StorageError::InvalidToken)?;
        if self.clock.now().timestamp() >= expires_unix {
            return Err(StorageError::GrantExpired);
        }
        self.get_object(&grant.key)
    }

    fn write_atomic(&self, path: &Path, bytes: &[u8]) -> Result<(), StorageError> {
        let parent = path.parent().expect("object paths have a parent");
        fs::create_dir_all(parent)?;
        let tmp = parent.join(format!(
            ".{}.tmp-{}",
            path.file_name().and_then(|n| n.to_str()).unwrap_or("object"),
            uuid::Uuid::new_v4().simple()
        ));
        {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(bytes)?;
            if self.sync_writes {
                f.sync_all()?;
            }
        }
        fs::rename(&tmp, path)?;
        Ok(())
    }

    fn write_index(&self, namespace: &str, index: &NamespaceIndex) -> Result<(), StorageError> {
        let bytes = canonical::to_canonical_bytes(index).expect("index holds no floats");
        self.write_atomic(&self.index_path(namespace), &bytes)
    }
}

impl ArtifactResolver for Storage {
    fn fetch(&self, namespace: &str, name: &str) -> Result<Option<Vec<u8>>, String> {
        let key = ObjectKey::new(namespace, name).map_err(|e| e.to_string())?;
        self.read_raw(&key).map_err(|e| e.to_string())
    }
}
