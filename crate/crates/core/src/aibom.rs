//! CycloneDX 1.6 AIBOM documents with an embedded Ed25519 signature.
//!
//! The field subset is frozen and described in `docs/aibom-schema.md`.
//! The signature covers the canonical JSON of the whole document with the
//! top-level `signature` member removed, wrapped in the envelope
//! pre-authentication encoding under [`AIBOM_PAYLOAD_TYPE`].

use std::collections::BTreeMap;

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::attestation::{pae, verify_envelope, KeyPair, PublicKey, SignedEnvelope, AIBOM_PAYLOAD_TYPE};
use crate::canonical::{self, decimal_string, CanonicalError};
use crate::digest::{compute_digest, is_valid_hex, Digest};
use crate::model::{outputs, ArtifactRef, EnvironmentSnapshot, JobRecord, TrainingMetrics};
use crate::report::{MatchResult, VerificationReport};
use crate::scanner::ScanReport;

pub const BOM_FORMAT: &str = "CycloneDX";
pub const SPEC_VERSION: &str = "1.6";
pub const SIGNATURE_ALGORITHM: &str = "Ed25519";
pub const TOOL_NAME: &str = "aibomgen";
/// Scheme of object URLs inside external references.
pub const OBJECT_URL_PREFIX: &str = "aibomgen://objects/";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ComponentType {
    MachineLearningModel,
    Data,
    Container,
    Library,
    Application,
}

impl ComponentType {
    const ALL: [&'static str; 5] = ["machine-learning-model", "data", "container", "library", "application"];

    /// Components of these types describe bytes and must carry a hash.
    pub fn is_file_backed(self) -> bool {
        matches!(self, Self::MachineLearningModel | Self::Data | Self::Container)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Hash {
    pub alg: String,
    pub content: String,
}

impl From<&Digest> for Hash {
    fn from(d: &Digest) -> Self {
        Self {
            alg: "SHA-256".to_owned(),
            content: d.hex().to_owned(),
        }
    }
}

impl Hash {
    pub fn digest(&self) -> Option<Digest> {
        (self.alg == "SHA-256").then(|| Digest::from_hex(&self.content).ok()).flatten()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ComponentEntry {
    #[serde(rename = "type")]
    pub component_type: ComponentType,
    #[serde(rename = "bom-ref")]
    pub bom_ref: String,
    pub name: String,
    pub version: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub hashes: Vec<Hash>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub description: Option<String>,
}

impl ComponentEntry {
    fn file(component_type: ComponentType, artifact: &ArtifactRef, description: &str) -> Self {
        Self {
            component_type,
            bom_ref: artifact.name.clone(),
            name: artifact.name.clone(),
            version: artifact.digest.hex()[..12].to_owned(),
            hashes: vec![Hash::from(&artifact.digest)],
            description: Some(description.to_owned()),
        }
    }

    pub fn digest(&self) -> Option<Digest> {
        self.hashes.iter().find_map(Hash::digest)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Tool {
    #[serde(rename = "type")]
    pub tool_type: ComponentType,
    pub name: String,
    pub version: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Tools {
    pub components: Vec<Tool>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Metadata {
    pub timestamp: DateTime<Utc>,
    pub tools: Tools,
    pub component: ComponentEntry,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExternalReference {
    #[serde(rename = "type")]
    pub reference_type: String,
    pub url: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub hashes: Vec<Hash>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub comment: Option<String>,
}

impl ExternalReference {
    pub const ATTESTATION: &'static str = "attestation";
    pub const VULNERABILITY_REPORT: &'static str = "vulnerability-assertion";

    fn for_artifact(reference_type: &str, artifact: &ArtifactRef, comment: &str) -> Self {
        Self {
            reference_type: reference_type.to_owned(),
            url: object_url(artifact),
            hashes: vec![Hash::from(&artifact.digest)],
            comment: Some(comment.to_owned()),
        }
    }

    /// `(namespace, name)` when the URL points into platform storage.
    pub fn object_key(&self) -> Option<(String, String)> {
        let rest = self.url.strip_prefix(OBJECT_URL_PREFIX)?;
        let (ns, name) = rest.split_once('/')?;
        Some((ns.to_owned(), name.to_owned()))
    }
}

fn object_url(artifact: &ArtifactRef) -> String {
    format!(
        "{OBJECT_URL_PREFIX}{}/{}",
        artifact.namespace.as_deref().unwrap_or("_"),
        artifact.name
    )
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Property {
    pub name: String,
    pub value: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct SignatureBlock {
    pub algorithm: String,
    pub key_id: String,
    pub value: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct AibomDocument {
    pub bom_format: String,
    pub spec_version: String,
    pub serial_number: String,
    pub version: u32,
    pub metadata: Metadata,
    pub components: Vec<ComponentEntry>,
    pub external_references: Vec<ExternalReference>,
    pub properties: Vec<Property>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub signature: Option<SignatureBlock>,
}

#[derive(Debug, thiserror::Error)]
pub enum AibomError {
    #[error("job is incomplete: missing output {0}")]
    IncompleteJob(String),
    #[error("document is already signed")]
    AlreadySigned,
    #[error("link reference for {0} has no storage namespace")]
    UnplacedLink(String),
    #[error(transparent)]
    Canonical(#[from] CanonicalError),
    #[error("malformed AIBOM: {0}")]
    Malformed(#[from] serde_json::Error),
}

fn prop(name: &str, value: impl ToString) -> Property {
    Property {
        name: format!("aibomgen:{name}"),
        value: value.to_string(),
    }
}

/// Builds the unsigned AIBOM for a job whose model and metrics are stored.
/// Everything except `serialNumber` and `metadata.timestamp` is a function of
/// the inputs.
pub fn generate_aibom(
    job: &JobRecord,
    link_ref: &ArtifactRef,
    env: &EnvironmentSnapshot,
    metrics: &TrainingMetrics,
    scan: Option<&ScanReport>,
) -> Result<AibomDocument, AibomError> {
    let model = job
        .output(outputs::MODEL)
        .ok_or_else(|| AibomError::IncompleteJob(outputs::MODEL.to_owned()))?;
    let metrics_ref = job
        .output(outputs::METRICS)
        .ok_or_else(|| AibomError::IncompleteJob(outputs::METRICS.to_owned()))?;
    if link_ref.namespace.is_none() {
        return Err(AibomError::UnplacedLink(link_ref.name.clone()));
    }
    let config = &job.spec.config;

    let mut dataset = job.spec.dataset.clone();
    dataset.name = outputs::DATASET.to_owned();
    let mut components = vec![ComponentEntry::file(ComponentType::Data, &dataset, "training dataset")];
    if let Some(base) = &job.spec.base_model {
        let mut base = base.clone();
        base.name = outputs::BASE_MODEL.to_owned();
        components.push(ComponentEntry::file(
            ComponentType::MachineLearningModel,
            &base,
            "base model used for warm start",
        ));
    }
    components.push(ComponentEntry::file(ComponentType::Data, metrics_ref, "training metrics"));
    let (framework, framework_version) = config
        .framework_tag
        .split_once('/')
        .unwrap_or((config.framework_tag.as_str(), ""));
    components.push(ComponentEntry {
        component_type: ComponentType::Library,
        bom_ref: config.framework_tag.clone(),
        name: framework.to_owned(),
        version: framework_version.to_owned(),
        hashes: vec![],
        description: Some("training framework".to_owned()),
    });
    components.push(ComponentEntry {
        component_type: ComponentType::Container,
        bom_ref: "worker-image".to_owned(),
        name: "aibomgen-worker".to_owned(),
        version: env.platform_version.clone(),
        hashes: vec![Hash::from(&env.worker_image_digest)],
        description: Some("worker environment".to_owned()),
    });

    let mut external_references = vec![ExternalReference::for_artifact(
        ExternalReference::ATTESTATION,
        link_ref,
        "in-toto link for the train step",
    )];

    let mut properties = vec![
        prop("job_id", &job.job_id),
        prop("submitter", &job.spec.submitter),
        prop("task", config.task),
        prop("epochs", config.epochs),
        prop("batch_size", config.batch_size),
        prop("learning_rate", decimal_string(config.learning_rate)?),
        prop("seed", config.seed),
        prop("metrics:final_loss", decimal_string(metrics.final_loss)?),
        prop("metrics:epochs_completed", metrics.loss_per_epoch.len()),
        prop("environment:hostname", &env.hostname),
        prop("environment:cpu_model", &env.cpu_model),
        prop("environment:total_memory_bytes", env.total_memory_bytes),
    ];

    if let Some(report_ref) = &env.scanner_report_ref {
        external_references.push(ExternalReference::for_artifact(
            ExternalReference::VULNERABILITY_REPORT,
            report_ref,
            "worker image vulnerability scan",
        ));
        if let Some(scan) = scan {
            for (severity, count) in &scan.summary {
                properties.push(prop(&format!("scan:{}", severity.as_str().to_lowercase()), count));
            }
        }
    }

    Ok(AibomDocument {
        bom_format: BOM_FORMAT.to_owned(),
        spec_version: SPEC_VERSION.to_owned(),
        serial_number: format!("urn:uuid:{}", uuid::Uuid::new_v4()),
        version: 1,
        metadata: Metadata {
            timestamp: Utc::now(),
            tools: Tools {
                components: vec![Tool {
                    tool_type: ComponentType::Application,
                    name: TOOL_NAME.to_owned(),
                    version: env!("CARGO_PKG_VERSION").to_owned(),
                }],
            },
            component: ComponentEntry::file(ComponentType::MachineLearningModel, model, "trained model"),
        },
        components,
        external_references,
        properties,
        signature: None,
    })
}

impl AibomDocument {
    pub fn from_bytes(bytes: &[u8]) -> Result<Self, AibomError> {
        Ok(serde_json::from_slice(bytes)?)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>, AibomError> {
        Ok(canonical::to_canonical_bytes(self)?)
    }

    pub fn link_reference(&self) -> Option<&ExternalReference> {
        self.external_references
            .iter()
            .find(|r| r.reference_type == ExternalReference::ATTESTATION)
    }

    pub fn property(&self, name: &str) -> Option<&str> {
        let key = format!("aibomgen:{name}");
        self.properties.iter().find(|p| p.name == key).map(|p| p.value.as_str())
    }

    /// Every component including `metadata.component`.
    pub fn all_components(&self) -> impl Iterator<Item = &ComponentEntry> {
        std::iter::once(&self.metadata.component).chain(self.components.iter())
    }
}

/// The bytes the embedded signature covers.
fn signing_input(doc: &Value) -> Vec<u8> {
    let mut unsigned = doc.clone();
    if let Value::Object(map) = &mut unsigned {
        map.remove("signature");
    }
    pae(AIBOM_PAYLOAD_TYPE, &canonical::canonical_serialize(&unsigned))
}

pub fn embed_signature(doc: AibomDocument, key: &KeyPair) -> Result<AibomDocument, AibomError> {
    if doc.signature.is_some() {
        return Err(AibomError::AlreadySigned);
    }
    canonical::to_canonical_bytes(&doc)?;
    let value = serde_json::to_value(&doc)?;
    let sig = key.sign(&signing_input(&value));
    Ok(AibomDocument {
        signature: Some(SignatureBlock {
            algorithm: SIGNATURE_ALGORITHM.to_owned(),
            key_id: key.key_id().to_owned(),
            value: STANDARD.encode(sig),
        }),
        ..doc
    })
}

/// Checks the embedded signature of a parsed AIBOM against `public_key`.
pub fn check_signature(doc: &Value, public_key: &PublicKey) -> Result<(), String> {
    let block = doc.get("signature").ok_or("document is unsigned")?;
    let block: SignatureBlock =
        serde_json::from_value(block.clone()).map_err(|e| format!("malformed signature block: {e}"))?;
    if block.algorithm != SIGNATURE_ALGORITHM {
        return Err(format!("unsupported algorithm {:?}", block.algorithm));
    }
    if block.key_id != public_key.key_id() {
        return Err(format!("signed by key {} which is not the platform key", block.key_id));
    }
    let raw = STANDARD
        .decode(&block.value)
        .map_err(|e| format!("signature is not base64: {e}"))?;
    if public_key.verify(&signing_input(doc), &raw) {
        Ok(())
    } else {
        Err("signature does not verify".to_owned())
    }
}

fn field<'a>(v: &'a Value, path: &str, violations: &mut Vec<String>) -> Option<&'a Value> {
    let found = v.get(path);
    if found.is_none() {
        violations.push(format!("missing field {path}"));
    }
    found
}

fn check_hashes(hashes: Option<&Value>, owner: &str, required: bool, violations: &mut Vec<String>) {
    let list = match hashes {
        None => {
            if required {
                violations.push(format!("{owner}: file-backed entry without hashes"));
            }
            return;
        }
        Some(Value::Array(list)) => list,
        Some(_) => {
            violations.push(format!("{owner}: hashes must be an array"));
            return;
        }
    };
    if required && list.is_empty() {
        violations.push(format!("{owner}: file-backed entry without hashes"));
    }
    for h in list {
        let alg = h.get("alg").and_then(Value::as_str);
        let content = h.get("content").and_then(Value::as_str);
        match (alg, content) {
            (Some("SHA-256"), Some(c)) if is_valid_hex(c) => {}
            (Some("SHA-256"), Some(c)) => violations.push(format!("{owner}: malformed digest {c:?}")),
            (Some(a), _) => violations.push(format!("{owner}: unsupported hash algorithm {a:?}")),
            _ => violations.push(format!("{owner}: hash entry needs alg and content")),
        }
    }
}

fn check_component(c: &Value, where_: &str, violations: &mut Vec<String>) {
    let name = c.get("name").and_then(Value::as_str);
    let label = match name {
        Some(n) if !n.is_empty() => format!("component {n:?}"),
        _ => {
            violations.push(format!("{where_}: component without a name"));
            where_.to_string()
        }
    };
    let ctype = match c.get("type").and_then(Value::as_str) {
        Some(t) if ComponentType::ALL.contains(&t) => {
            Some(serde_json::from_value::<ComponentType>(Value::String(t.to_owned())).expect("listed type"))
        }
        Some(t) => {
            violations.push(format!("{label}: unknown type {t:?}"));
            None
        }
        None => {
            violations.push(format!("{label}: missing field type"));
            None
        }
    };
    if !c.get("version").is_some_and(Value::is_string) {
        violations.push(format!("{label}: missing field version"));
    }
    if !c.get("bom-ref").is_some_and(Value::is_string) {
        violations.push(format!("{label}: missing field bom-ref"));
    }
    check_hashes(c.get("hashes"), &label, ctype.is_some_and(ComponentType::is_file_backed), violations);
}

/// Structural rules of the frozen AIBOM subset. Empty iff the document is
/// well formed.
pub fn validate_schema(doc: &Value) -> Vec<String> {
    let mut v = Vec::new();
    if !doc.is_object() {
        return vec!["document is not a JSON object".to_owned()];
    }
    if let Some(f) = field(doc, "bomFormat", &mut v) {
        if f != BOM_FORMAT {
            v.push(format!("bomFormat must be {BOM_FORMAT:?}"));
        }
    }
    if let Some(f) = field(doc, "specVersion", &mut v) {
        if f != SPEC_VERSION {
            v.push(format!("specVersion must be {SPEC_VERSION:?}"));
        }
    }
    if let Some(f) = field(doc, "serialNumber", &mut v) {
        let ok = f
            .as_str()
            .and_then(|s| s.strip_prefix("urn:uuid:"))
            .is_some_and(|u| uuid::Uuid::parse_str(u).is_ok());
        if !ok {
            v.push("serialNumber must be a urn:uuid URN".to_owned());
        }
    }
    if let Some(f) = field(doc, "version", &mut v) {
        if !f.as_u64().is_some_and(|n| n >= 1) {
            v.push("version must be an integer >= 1".to_owned());
        }
    }
    if let Some(meta) = field(doc, "metadata", &mut v) {
        match meta.get("timestamp").and_then(Value::as_str) {
            Some(ts) if DateTime::parse_from_rfc3339(ts).is_ok() => {}
            Some(_) => v.push("metadata.timestamp is not RFC 3339".to_owned()),
            None => v.push("missing field metadata.timestamp".to_owned()),
        }
        let tools_ok = meta
            .get("tools")
            .and_then(|t| t.get("components"))
            .and_then(Value::as_array)
            .is_some_and(|list| list.iter().all(|t| t.get("name").is_some_and(Value::is_string)));
        if !tools_ok {
            v.push("metadata.tools.components must list named tools".to_owned());
        }
        match meta.get("component") {
            Some(c) => {
                check_component(c, "metadata.component", &mut v);
                if c.get("type").and_then(Value::as_str) != Some("machine-learning-model") {
                    v.push("metadata.component must be a machine-learning-model".to_owned());
                }
            }
            None => v.push("missing field metadata.component".to_owned()),
        }
    }
    if let Some(list) = field(doc, "components", &mut v) {
        match list.as_array() {
            Some(items) => {
                for (i, c) in items.iter().enumerate() {
                    check_component(c, &format!("components[{i}]"), &mut v);
                }
            }
            None => v.push("components must be an array".to_owned()),
        }
    }
    if let Some(list) = field(doc, "externalReferences", &mut v) {
        match list.as_array() {
            Some(items) => {
                let mut attestations = 0;
                for (i, r) in items.iter().enumerate() {
                    let label = format!("externalReferences[{i}]");
                    if !r.get("url").is_some_and(Value::is_string) {
                        v.push(format!("{label}: missing field url"));
                    }
                    let is_attestation = r.get("type").and_then(Value::as_str) == Some(ExternalReference::ATTESTATION);
                    if is_attestation {
                        attestations += 1;
                    }
                    if !r.get("type").is_some_and(Value::is_string) {
                        v.push(format!("{label}: missing field type"));
                    }
                    check_hashes(r.get("hashes"), &label, is_attestation, &mut v);
                }
                if attestations != 1 {
                    v.push(format!(
                        "externalReferences must contain exactly one link attestation, found {attestations}"
                    ));
                }
            }
            None => v.push("externalReferences must be an array".to_owned()),
        }
    }
    if let Some(list) = field(doc, "properties", &mut v) {
        let ok = list.as_array().is_some_and(|items| {
            items
                .iter()
                .all(|p| p.get("name").is_some_and(Value::is_string) && p.get("value").is_some_and(Value::is_string))
        });
        if !ok {
            v.push("properties must be an array of {name, value} strings".to_owned());
        }
    }
    if let Some(sig) = doc.get("signature") {
        if serde_json::from_value::<SignatureBlock>(sig.clone()).is_err() {
            v.push("signature block must have algorithm, keyId and value".to_owned());
        }
    }
    v
}

/// Read access to stored artifact bytes, without integrity checks, so that a
/// verifier sees exactly what storage holds.
pub trait ArtifactResolver {
    /// `Ok(None)` when nothing is stored under the key.
    fn fetch(&self, namespace: &str, name: &str) -> Result<Option<Vec<u8>>, String>;
}

/// Compares every material and product in `link` to storage.
pub fn match_link_against_storage(
    link: &crate::attestation::LinkFile,
    resolver: &dyn ArtifactResolver,
) -> Vec<MatchResult> {
    link.artifacts()
        .map(|(name, expected)| match resolver.fetch(&link.job_id, name) {
            Ok(Some(bytes)) => MatchResult::compare(name, expected, compute_digest(&bytes)),
            Ok(None) | Err(_) => MatchResult::missing(name, expected),
        })
        .collect()
}

/// End-to-end check of an AIBOM and the link envelope it references.
///
/// Checks, in order: `schema_valid`, `aibom_signature_valid`,
/// `link_reference_digest_matches`, `link_envelope_valid`,
/// `components_match_link` and, with a resolver, `all_artifacts_match`.
pub fn verify_aibom(
    aibom_bytes: &[u8],
    public_key: &PublicKey,
    link_envelope_bytes: &[u8],
    resolver: Option<&dyn ArtifactResolver>,
) -> VerificationReport {
    let mut report = VerificationReport::new();

    let value = match canonical::parse(aibom_bytes) {
        Ok(v) => v,
        Err(e) => {
            report.fail("schema_valid", format!("AIBOM is not JSON: {e}"));
            return report;
        }
    };
    let violations = validate_schema(&value);
    if violations.is_empty() {
        report.pass("schema_valid");
    } else {
        report.fail("schema_valid", violations.join("; "));
    }

    match check_signature(&value, public_key) {
        Ok(()) => report.pass("aibom_signature_valid"),
        Err(why) => report.fail("aibom_signature_valid", why),
    }

    let doc = serde_json::from_value::<AibomDocument>(value).ok();
    let link_ref = doc.as_ref().and_then(AibomDocument::link_reference);
    let link_name = link_ref
        .and_then(ExternalReference::object_key)
        .map(|(_, name)| name)
        .unwrap_or_else(|| "link file".to_owned());
    let envelope_digest = compute_digest(link_envelope_bytes);
    match link_ref.and_then(|r| r.hashes.iter().find_map(Hash::digest)) {
        Some(expected) if expected == envelope_digest => report.pass("link_reference_digest_matches"),
        Some(expected) => report.fail(
            "link_reference_digest_matches",
            format!("{link_name}: AIBOM references {expected} but the link envelope is {envelope_digest}"),
        ),
        None => report.fail("link_reference_digest_matches", "AIBOM has no usable link reference"),
    }

    let mut trusted_link = false;
    let link = match SignedEnvelope::from_bytes(link_envelope_bytes) {
        Ok(env) => {
            let env_report = verify_envelope(&env, public_key);
            if env_report.passed {
                report.pass("link_envelope_valid");
                trusted_link = true;
            } else {
                let failed: Vec<String> = env_report
                    .failed_checks()
                    .map(|c| format!("{}: {}", c.name, c.detail.as_deref().unwrap_or("failed")))
                    .collect();
                report.fail("link_envelope_valid", format!("{link_name}: {}", failed.join("; ")));
            }
            env.link().ok()
        }
        Err(e) => {
            report.fail("link_envelope_valid", format!("{link_name}: {e}"));
            None
        }
    };

    match (&doc, &link) {
        (Some(doc), Some(link)) => {
            let problems = cross_check(doc, link);
            if problems.is_empty() {
                report.pass("components_match_link");
            } else {
                report.fail("components_match_link", problems.join("; "));
            }
        }
        _ => report.fail("components_match_link", "AIBOM or link could not be decoded"),
    }

    if let Some(resolver) = resolver {
        match &link {
            Some(_) if !trusted_link => {
                report.fail("all_artifacts_match", "link envelope does not verify, artifacts not resolved")
            }
            Some(link) => {
                let results = match_link_against_storage(link, resolver);
                let bad: Vec<&str> = results
                    .iter()
                    .filter(|r| !r.is_match())
                    .map(|r| r.name.as_str())
                    .collect();
                let detail = (!bad.is_empty()).then(|| format!("tampered or missing: {}", bad.join(", ")));
                report.artifacts = results;
                report.record("all_artifacts_match", detail.is_none(), detail);
            }
            None => report.fail("all_artifacts_match", "no decodable link to resolve artifacts from"),
        }
    }

    report
}

/// File-backed components must agree with the digests in the link.
fn cross_check(doc: &AibomDocument, link: &crate::attestation::LinkFile) -> Vec<String> {
    let recorded: BTreeMap<&str, &Digest> = link.artifacts().map(|(n, d)| (n.as_str(), d)).collect();
    let mut problems = Vec::new();
    for c in doc.all_components() {
        let Some(digest) = c.digest() else { continue };
        match c.component_type {
            ComponentType::Container => {
                if digest != link.environment.worker_image_digest {
                    problems.push(format!("{}: image digest differs from the link environment", c.name));
                }
            }
            _ => match recorded.get(c.name.as_str()) {
                Some(d) if **d == digest => {}
                Some(_) => problems.push(format!("{}: digest differs from the link", c.name)),
                None => problems.push(format!("{}: not recorded in the link", c.name)),
            },
        }
    }
    if let Some(job_id) = doc.property("job_id") {
        if job_id != link.job_id {
            problems.push(format!("AIBOM is for job {job_id} but the link is for {}", link.job_id));
        }
    }
    problems
}

#[cfg(test)]
mod tests {
    use std::collections::HashMap;

    use super::*;
    use crate::attestation::{create_link, sign_envelope, LINK_PAYLOAD_TYPE};
    use crate::model::{JobSpec, JobState, Task, TrainingConfig};
    use crate::report::MatchStatus;

    const JOB: &str = "0b7e4f2a-9c1d-4d8e-a7f3-5e6b2c1d0a99";

    #[derive(Default)]
    struct MemStore(HashMap<(String, String), Vec<u8>>);

    impl MemStore {
        fn put(&mut self, ns: &str, name: &str, bytes: &[u8]) -> ArtifactRef {
            self.0.insert((ns.to_owned(), name.to_owned()), bytes.to_vec());
            ArtifactRef::new(name, compute_digest(bytes), bytes.len() as u64, "application/octet-stream").in_namespace(ns)
        }
    }

    impl ArtifactResolver for MemStore {
        fn fetch(&self, namespace: &str, name: &str) -> Result<Option<Vec<u8>>, String> {
            Ok(self.0.get(&(namespace.to_owned(), name.to_owned())).cloned())
        }
    }

    fn env() -> EnvironmentSnapshot {
        let t = DateTime::from_timestamp(1_735_689_600, 0).unwrap();
        EnvironmentSnapshot {
            worker_image_digest: compute_digest(b"worker"),
            platform_version: "0.1.0".into(),
            hostname: "h".into(),
            cpu_model: "cpu".into(),
            total_memory_bytes: 1 << 30,
            wall_clock_start: t,
            wall_clock_end: t + chrono::Duration::seconds(2),
            scanner_report_ref: None,
        }
    }

    struct Built {
        store: MemStore,
        job: JobRecord,
        link_bytes: Vec<u8>,
        link_ref: ArtifactRef,
        key: KeyPair,
    }

    fn build() -> Built {
        let mut store = MemStore::default();
        let dataset = store.put(JOB, outputs::DATASET, b"x,y\n1,2\n");
        let model = store.put(JOB, outputs::MODEL, b"RTM1model");
        let metrics = store.put(JOB, outputs::METRICS, b"{\"final_loss\":\"0.5\"}");
        let job = JobRecord {
            job_id: JOB.into(),
            spec: JobSpec {
                dataset: dataset.clone(),
                base_model: None,
                config: TrainingConfig::new(Task::Regression, 3, 2, 0.1),
                submitter: "alice".into(),
            },
            state: JobState::Running,
            created_at: env().wall_clock_start,
            started_at: Some(env().wall_clock_start),
            finished_at: None,
            outputs: vec![model.clone(), metrics.clone()],
            failure_reason: None,
            attempts: 1,
        };
        let key = KeyPair::from_seed([9; 32]);
        let link = create_link(&job, &env(), &[dataset], &[model, metrics]).unwrap();
        let link_bytes = sign_envelope(&link, LINK_PAYLOAD_TYPE, &key).unwrap().to_bytes();
        let link_ref = store.put(JOB, &outputs::link_name(JOB), &link_bytes);
        Built {
            store,
            job,
            link_bytes,
            link_ref,
            key,
        }
    }

    fn signed(b: &Built) -> Vec<u8> {
        let metrics = TrainingMetrics {
            final_loss: 0.5,
            loss_per_epoch: vec![0.9, 0.7, 0.5],
            ..Default::default()
        };
        let doc = generate_aibom(&b.job, &b.link_ref, &env(), &metrics, None).unwrap();
        embed_signature(doc, &b.key).unwrap().to_bytes().unwrap()
    }

    #[test]
    fn generation_needs_outputs_and_placed_link() {
        let b = build();
        let mut job = b.job.clone();
        job.outputs.retain(|o| o.name != outputs::MODEL);
        let m = TrainingMetrics::default();
        assert!(matches!(
            generate_aibom(&job, &b.link_ref, &env(), &m, None),
            Err(AibomError::IncompleteJob(n)) if n == outputs::MODEL
        ));
        let mut unplaced = b.link_ref.clone();
        unplaced.namespace = None;
        assert!(matches!(
            generate_aibom(&b.job, &unplaced, &env(), &m, None),
            Err(AibomError::UnplacedLink(_))
        ));
    }

    #[test]
    fn document_shape() {
        let b = build();
        let doc = AibomDocument::from_bytes(&signed(&b)).unwrap();
        assert_eq!(doc.bom_format, "CycloneDX");
        assert_eq!(doc.spec_version, "1.6");
        assert_eq!(doc.metadata.component.name, outputs::MODEL);
        assert_eq!(doc.property("job_id"), Some(JOB));
        assert_eq!(doc.property("metrics:final_loss"), Some("0.5"));
        assert_eq!(doc.property("learning_rate"), Some("0.1"));
        let link = doc.link_reference().unwrap();
        assert_eq!(link.object_key(), Some((JOB.to_owned(), outputs::link_name(JOB))));
        assert_eq!(link.hashes[0].digest(), Some(compute_digest(&b.link_bytes)));
        assert!(validate_schema(&serde_json::to_value(&doc).unwrap()).is_empty());
        assert!(matches!(embed_signature(doc, &b.key), Err(AibomError::AlreadySigned)));
    }

    #[test]
    fn signature_checks() {
        let b = build();
        let bytes = signed(&b);
        let mut v: Value = serde_json::from_slice(&bytes).unwrap();
        assert_eq!(check_signature(&v, b.key.public_key()), Ok(()));

        let other = KeyPair::from_seed([1; 32]);
        assert!(check_signature(&v, other.public_key()).unwrap_err().contains("not the platform key"));

        v["properties"][0]["value"] = Value::String("someone-else".into());
        assert_eq!(
            check_signature(&v, b.key.public_key()),
            Err("signature does not verify".to_owned())
        );
        v.as_object_mut().unwrap().remove("signature");
        assert!(check_signature(&v, b.key.public_key()).is_err());
    }

    #[test]
    fn schema_violations_are_named() {
        let b = build();
        let mut v: Value = serde_json::from_slice(&signed(&b)).unwrap();
        v.as_object_mut().unwrap().remove("specVersion");
        v["components"][0].as_object_mut().unwrap().remove("hashes");
        let violations = validate_schema(&v);
        assert!(violations.iter().any(|m| m.contains("specVersion")), "{violations:?}");
        assert!(violations.iter().any(|m| m.contains("dataset.csv")), "{violations:?}");
        assert!(!validate_schema(&Value::Null).is_empty());
    }

    #[test]
    fn end_to_end_verification() {
        let b = build();
        let aibom = signed(&b);
        let report = verify_aibom(&aibom, b.key.public_key(), &b.link_bytes, Some(&b.store));
        assert!(report.passed, "{report:?}");
        assert_eq!(report.artifacts.len(), 3);
    }

    #[test]
    fn mutated_artifact_is_named() {
        let mut b = build();
        let aibom = signed(&b);
        b.store.put(JOB, outputs::METRICS, b"{\"final_loss\":\"0.1\"}");
        let report = verify_aibom(&aibom, b.key.public_key(), &b.link_bytes, Some(&b.store));
        assert_eq!(report.outcome("all_artifacts_match"), Some(false));
        let detail = report.check("all_artifacts_match").unwrap().detail.clone().unwrap();
        assert!(detail.contains(outputs::METRICS));
        let bad: Vec<_> = report.artifacts.iter().filter(|r| !r.is_match()).collect();
        assert_eq!(bad.len(), 1);
        assert_eq!(bad[0].status, MatchStatus::Mismatch);
    }

    #[test]
    fn swapped_link_is_detected() {
        let b = build();
        let aibom = signed(&b);
        let mut other = b.job.clone();
        other.job_id = "1b7e4f2a-9c1d-4d8e-a7f3-5e6b2c1d0a99".into();
        let link = create_link(&other, &env(), std::slice::from_ref(&b.job.spec.dataset), &b.job.outputs).unwrap();
        let swapped = sign_envelope(&link, LINK_PAYLOAD_TYPE, &b.key).unwrap().to_bytes();
        let report = verify_aibom(&aibom, b.key.public_key(), &swapped, None);
        assert_eq!(report.outcome("link_reference_digest_matches"), Some(false));
        assert_eq!(report.outcome("link_envelope_valid"), Some(true));
        assert_eq!(report.outcome("components_match_link"), Some(false));
    }

    #[test]
    fn untrusted_link_does_not_blame_storage() {
        let b = build();
        let aibom = signed(&b);
        let mut dataset = b.job.spec.dataset.clone();
        dataset.digest = compute_digest(b"something else");
        let link = create_link(&b.job, &env(), &[dataset], &b.job.outputs).unwrap();
        let forged = sign_envelope(&link, LINK_PAYLOAD_TYPE, &KeyPair::from_seed([1; 32]))
            .unwrap()
            .to_bytes();
        let report = verify_aibom(&aibom, b.key.public_key(), &forged, Some(&b.store));
        assert_eq!(report.outcome("link_envelope_valid"), Some(false));
        assert_eq!(report.outcome("all_artifacts_match"), Some(false));
        assert!(report.artifacts.is_empty());
    }

    #[test]
    fn scan_summary_becomes_properties() {
        use crate::scanner::{scan, worker_manifest, Advisory, AdvisoryDb, Severity};
        let b = build();
        let db = AdvisoryDb::new(vec![Advisory {
            advisory_id: "ADV-1".into(),
            component_name: "csv".into(),
            version_range: ">=0.0.0".into(),
            severity: Severity::High,
        }])
        .unwrap();
        let report = scan(&worker_manifest(compute_digest(b"worker")), &db);
        let mut e = env();
        e.scanner_report_ref = Some(ArtifactRef::new("scans/x.json", compute_digest(b"r"), 1, "application/json").in_namespace("platform"));
        let doc = generate_aibom(&b.job, &b.link_ref, &e, &TrainingMetrics::default(), Some(&report)).unwrap();
        assert_eq!(doc.property("scan:high"), Some("1"));
        assert!(doc
            .external_references
            .iter()
            .any(|r| r.reference_type == ExternalReference::VULNERABILITY_REPORT));
    }
}
