//! Vulnerability scanning of the worker's component manifest against a local
//! advisory database.

use std::collections::{BTreeMap, HashSet};
use std::path::Path;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, RwLock};
use std::thread::JoinHandle;
use std::time::Duration;

use chrono::{DateTime, Utc};
use semver::{Version, VersionReq};
use serde::{Deserialize, Serialize};

use crate::canonical;
use crate::digest::{compute_digest, Digest};
use crate::model::ArtifactRef;
use crate::storage::{ObjectKey, Storage, StorageError, PLATFORM_PRINCIPAL};

/// Storage namespace for platform-owned objects such as scan reports.
pub const PLATFORM_NAMESPACE: &str = "platform";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Severity {
    Low,
    Medium,
    High,
    Critical,
}

impl Severity {
    pub fn as_str(self) -> &'static str {
        match self {
            Severity::Low => "LOW",
            Severity::Medium => "MEDIUM",
            Severity::High => "HIGH",
            Severity::Critical => "CRITICAL",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Advisory {
    pub advisory_id: String,
    pub component_name: String,
    /// Semver requirement, e.g. `">=1.0.0, <1.4.2"`.
    pub version_range: String,
    pub severity: Severity,
}

#[derive(Debug, thiserror::Error)]
pub enum ScannerError {
    #[error("cannot read advisory database: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed advisory database: {0}")]
    Malformed(#[from] serde_json::Error),
    #[error("duplicate advisory id {0}")]
    DuplicateId(String),
    #[error("advisory {id}: bad version range {range:?}: {reason}")]
    BadRange { id: String, range: String, reason: String },
    #[error(transparent)]
    Storage(#[from] StorageError),
}

#[derive(Debug, Clone)]
struct CompiledAdvisory {
    advisory: Advisory,
    req: VersionReq,
}

/// Advisory entries with unique ids and pre-parsed version ranges.
#[derive(Debug, Clone, Default)]
pub struct AdvisoryDb {
    entries: Vec<CompiledAdvisory>,
}

#[derive(Deserialize)]
struct AdvisoryFile {
    advisories: Vec<Advisory>,
}

impl AdvisoryDb {
    pub fn new(advisories: Vec<Advisory>) -> Result<Self, ScannerError> {
        let mut seen = HashSet::new();
        let mut entries = Vec::with_capacity(advisories.len());
        for a in advisories {
            if !seen.insert(a.advisory_id.clone()) {
                return Err(ScannerError::DuplicateId(a.advisory_id));
            }
            let req = VersionReq::parse(&a.version_range).map_err(|e| ScannerError::BadRange {
                id: a.advisory_id.clone(),
                range: a.version_range.clone(),
                reason: e.to_string(),
            })?;
            entries.push(CompiledAdvisory { advisory: a, req });
        }
        Ok(Self { entries })
    }

    /// Reads `{"advisories": [...]}`.
    pub fn from_json(bytes: &[u8]) -> Result<Self, ScannerError> {
        let file: AdvisoryFile = serde_json::from_slice(bytes)?;
        Self::new(file.advisories)
    }

    pub fn load(path: &Path) -> Result<Self, ScannerError> {
        Self::from_json(&std::fs::read(path)?)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestComponent {
    pub name: String,
    pub version: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    /// Digest of the scanned image (worker binary when no container exists).
    pub target: Digest,
    pub components: Vec<ManifestComponent>,
}

impl Manifest {
    pub fn new(target: Digest, components: &[(&str, &str)]) -> Self {
        Self {
            target,
            components: components
                .iter()
                .map(|(n, v)| ManifestComponent {
                    name: (*n).to_owned(),
                    version: (*v).to_owned(),
                })
                .collect(),
        }
    }
}

/// Components the worker runs with.
pub fn worker_manifest(target: Digest) -> Manifest {
    Manifest::new(
        target,
        &[
            ("aibomgen-worker", env!("CARGO_PKG_VERSION")),
            ("reftrainer", "1.0.0"),
            ("ed25519-dalek", "2.2.0"),
            ("sha2", "0.10.9"),
            ("serde_json", "1.0.0"),
            ("csv", "1.4.0"),
        ],
    )
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Finding {
    pub advisory_id: String,
    pub component_name: String,
    pub installed_version: String,
    pub severity: Severity,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScanReport {
    pub scanned_at: DateTime<Utc>,
    pub target_digest: Digest,
    pub findings: Vec<Finding>,
    /// Non-zero counts only.
    pub summary: BTreeMap<Severity, u32>,
}

impl ScanReport {
    pub fn is_consistent(&self) -> bool {
        let mut counts = BTreeMap::new();
        for f in &self.findings {
            *counts.entry(f.severity).or_insert(0u32) += 1;
        }
        counts == self.summary
    }
}

/// Pads `1` and `1.2` to full semver so loose manifests still match.
fn parse_version(v: &str) -> Option<Version> {
    let v = v.trim().trim_start_matches('v');
    Version::parse(v).ok().or_else(|| {
        let dots = v.matches('.').count();
        let padded = match dots {
            0 => format!("{v}.0.0"),
            1 => format!("{v}.0"),
            _ => return None,
        };
        Version::parse(&padded).ok()
    })
}

pub fn scan(manifest: &Manifest, db: &AdvisoryDb) -> ScanReport {
    let mut findings = Vec::new();
    for component in &manifest.components {
        let Some(version) = parse_version(&component.version) else {
            tracing::warn!(component = %component.name, version = %component.version, "unparseable version, skipped");
            continue;
        };
        for entry in &db.entries {
            if entry.advisory.component_name == component.name && entry.req.matches(&version) {
                findings.push(Finding {
                    advisory_id: entry.advisory.advisory_id.clone(),
                    component_name: component.name.clone(),
                    installed_version: component.version.clone(),
                    severity: entry.advisory.severity,
                });
            }
        }
    }
    findings.sort_by(|a, b| {
        (&a.component_name, &a.advisory_id).cmp(&(&b.component_name, &b.advisory_id))
    });
    let mut summary = BTreeMap::new();
    for f in &findings {
        *summary.entry(f.severity).or_insert(0) += 1;
    }
    ScanReport {
        scanned_at: Utc::now(),
        target_digest: manifest.target.clone(),
        findings,
        summary,
    }
}

/// Most recent stored report; read by workers when snapshotting the
/// environment.
#[derive(Debug, Default)]
pub struct LatestScan {
    inner: RwLock<Option<(ArtifactRef, ScanReport)>>,
}

impl LatestScan {
    pub fn get(&self) -> Option<(ArtifactRef, ScanReport)> {
        self.inner.read().unwrap().clone()
    }

    fn set(&self, r: ArtifactRef, report: ScanReport) {
        *self.inner.write().unwrap() = Some((r, report));
    }
}

/// Scans once, stores the report as `scans/<timestamp>.json` and publishes it.
pub fn run_scan(
    storage: &Storage,
    manifest: &Manifest,
    db: &AdvisoryDb,
    latest: &LatestScan,
) -> Result<ArtifactRef, ScannerError> {
    storage.create_namespace(PLATFORM_NAMESPACE, PLATFORM_PRINCIPAL)?;
    let report = scan(manifest, db);
    let bytes = canonical::to_canonical_bytes(&report).expect("scan reports hold no floats");
    let stamp = report.scanned_at.format("%Y%m%dT%H%M%S%.6fZ");
    let mut name = format!("scans/{stamp}.json");
    let mut n = 1;
    let stored = loop {
        match storage.put_object(&ObjectKey::new(PLATFORM_NAMESPACE, &name)?, &bytes) {
            Ok(r) => break r,
            Err(StorageError::ImmutabilityViolation(_)) => {
                n += 1;
                name = format!("scans/{stamp}-{n}.json");
            }
            Err(e) => return Err(e.into()),
        }
    };
    debug_assert_eq!(stored.digest, compute_digest(&bytes));
    latest.set(stored.clone(), report);
    Ok(stored)
}

/// Background loop running [`run_scan`] every `interval`. Dropping the
/// handle stops the loop.
pub struct ScanScheduler {
    stop: Arc<AtomicBool>,
    handle: Option<JoinHandle<()>>,
}

impl ScanScheduler {
    pub fn spawn(
        storage: Arc<Storage>,
        manifest: Manifest,
        db: AdvisoryDb,
        latest: Arc<LatestScan>,
        interval: Duration,
    ) -> Self {
        let stop = Arc::new(AtomicBool::new(false));
        let flag = stop.clone();
        let handle = std::thread::Builder::new()
            .name("scan-scheduler".into())
            .spawn(move || {
                while !flag.load(Ordering::Relaxed) {
                    match run_scan(&storage, &manifest, &db, &latest) {
                        Ok(r) => tracing::info!(report = %r.name, "stored scan report"),
                        Err(e) => tracing::error!(error = %e, "scan failed"),
                    }
                    let deadline = std::time::Instant::now() + interval;
                    while !flag.load(Ordering::Relaxed) && std::time::Instant::now() < deadline {
                        std::thread::sleep(Duration::from_millis(20).min(interval));
                    }
                }
            })
            .expect("spawn scan thread");
        Self {
            stop,
            handle: Some(handle),
        }
    }

    pub fn stop(mut self) {
        self.shutdown();
    }

    fn shutdown(&mut self) {
        self.stop.store(true, Ordering::Relaxed);
        if let Some(h) = self.handle.take() {
            let _ = h.join();
        }
    }
}

impl Drop for ScanScheduler {
    fn drop(&mut self) {
        self.shutdown();
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn db() -> AdvisoryDb {
        AdvisoryDb::from_json(
            br#"{"advisories":[
                {"advisory_id":"ADV-1","component_name":"libfoo","version_range":">=1.0.0, <1.4.2","severity":"HIGH"},
                {"advisory_id":"ADV-2","component_name":"libfoo","version_range":"<0.9","severity":"LOW"},
                {"advisory_id":"ADV-3","component_name":"libbar","version_range":"*","severity":"CRITICAL"}
            ]}"#,
        )
        .unwrap()
    }

    fn target() -> Digest {
        compute_digest(b"image")
    }

    #[test]
    fn empty_manifest_has_no_findings() {
        let r = scan(&Manifest::new(target(), &[]), &db());
        assert!(r.findings.is_empty());
        assert!(r.summary.is_empty());
    }

    #[test]
    fn single_high_match() {
        let r = scan(&Manifest::new(target(), &[("libfoo", "1.2.0")]), &db());
        assert_eq!(r.summary, BTreeMap::from([(Severity::High, 1)]));
        assert_eq!(r.findings[0].advisory_id, "ADV-1");
        assert!(r.is_consistent());
    }

    #[test]
    fn range_boundaries_and_loose_versions() {
        let d = db();
        assert!(scan(&Manifest::new(target(), &[("libfoo", "1.4.2")]), &d).findings.is_empty());
        assert_eq!(scan(&Manifest::new(target(), &[("libfoo", "1.0")]), &d).findings.len(), 1);
        assert_eq!(scan(&Manifest::new(target(), &[("libfoo", "0.8.1")]), &d).summary[&Severity::Low], 1);
        assert!(scan(&Manifest::new(target(), &[("libfoo", "banana")]), &d).findings.is_empty());
    }

    #[test]
    fn deterministic_except_timestamp() {
        let m = Manifest::new(target(), &[("libbar", "3.0.0"), ("libfoo", "1.1.0")]);
        let mut a = scan(&m, &db());
        let b = scan(&m, &db());
        a.scanned_at = b.scanned_at;
        assert_eq!(a, b);
        assert_eq!(a.findings.len(), 2);
    }

    #[test]
    fn db_validation() {
        let dup = br#"{"advisories":[
            {"advisory_id":"A","component_name":"x","version_range":"*","severity":"LOW"},
            {"advisory_id":"A","component_name":"y","version_range":"*","severity":"LOW"}]}"#;
        assert!(matches!(AdvisoryDb::from_json(dup), Err(ScannerError::DuplicateId(_))));
        let bad = br#"{"advisories":[{"advisory_id":"A","component_name":"x","version_range":"~>>1","severity":"LOW"}]}"#;
        assert!(matches!(AdvisoryDb::from_json(bad), Err(ScannerError::BadRange { .. })));
    }

    #[test]
    fn reports_are_stored_and_published() {
        let dir = tempfile::tempdir().unwrap();
        let storage =
            Arc::new(Storage::open(crate::storage::StorageConfig::new(dir.path(), b"s".to_vec())).unwrap());
        let latest = Arc::new(LatestScan::default());
        let m = Manifest::new(target(), &[("libfoo", "1.2.0")]);
        let first = run_scan(&storage, &m, &db(), &latest).unwrap();
        let second = run_scan(&storage, &m, &db(), &latest).unwrap();
        assert_ne!(first.name, second.name);
        assert!(first.name.starts_with("scans/"));
        assert_eq!(latest.get().unwrap().0, second);
        let stored: ScanReport =
            serde_json::from_slice(&storage.get_object(&ObjectKey::of(&second).unwrap()).unwrap()).unwrap();
        assert!(stored.is_consistent());

        let sched = ScanScheduler::spawn(storage.clone(), m, db(), latest.clone(), Duration::from_millis(10));
        std::thread::sleep(Duration::from_millis(60));
        sched.stop();
        assert!(storage.list(PLATFORM_NAMESPACE).len() >= 3);
    }
}
