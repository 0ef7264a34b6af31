//! The fixed per-job workflow a worker runs for every claimed job.
//!
//! fetch → parse → snapshot → train → serialize → upload → hash → attest →
//! sign → AIBOM → complete. A failing step fails the job with the step name
//! as the reason; the pipeline has no other way to finish a job.

use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, OnceLock};
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use crate::aibom::{embed_signature, generate_aibom};
use crate::attestation::{create_link, sign_envelope, KeyError, KeyPair, LINK_PAYLOAD_TYPE};
use crate::canonical;
use crate::clock::{Clock, SystemClock};
use crate::digest::{compute_digest, Digest};
use crate::model::{outputs, ArtifactRef, EnvironmentSnapshot, JobRecord, TrainingMetrics};
use crate::orchestrator::{Lease, Orchestrator, OrchestratorError};
use crate::scanner::LatestScan;
use crate::storage::{ObjectKey, Storage, StorageError};
use crate::trainer;

pub const INPUT_TAMPER_DETECTED: &str = "InputTamperDetected";

/// Where the platform signing key comes from. Read at signing time, so a key
/// that becomes unreadable fails the job at the "sign" step.
pub trait KeySource: Send + Sync {
    fn signing_key(&self) -> Result<KeyPair, KeyError>;
}

impl KeySource for KeyPair {
    fn signing_key(&self) -> Result<KeyPair, KeyError> {
        Ok(self.clone())
    }
}

/// PEM file on disk.
#[derive(Debug, Clone)]
pub struct KeyFile(pub PathBuf);

impl KeySource for KeyFile {
    fn signing_key(&self) -> Result<KeyPair, KeyError> {
        KeyPair::load(&self.0)
    }
}

#[derive(Debug, thiserror::Error)]
pub enum WorkerError {
    #[error("{INPUT_TAMPER_DETECTED}: {name} expected {expected}, found {actual}")]
    InputTamperDetected { name: String, expected: Digest, actual: Digest },
    #[error("step {step} failed: {message}")]
    Step { step: &'static str, message: String },
}

impl WorkerError {
    fn step(step: &'static str, e: impl std::fmt::Display) -> Self {
        WorkerError::Step {
            step,
            message: e.to_string(),
        }
    }

    /// The failure reason recorded on the job.
    pub fn reason(&self) -> String {
        match self {
            WorkerError::InputTamperDetected { .. } => self.to_string(),
            WorkerError::Step { step, .. } => (*step).to_owned(),
        }
    }
}

#[derive(Debug)]
pub enum RunOutcome {
    Completed { job: JobRecord, metrics: TrainingMetrics },
    Failed { job: JobRecord, error: WorkerError },
}

impl RunOutcome {
    pub fn job(&self) -> &JobRecord {
        match self {
            RunOutcome::Completed { job, .. } | RunOutcome::Failed { job, .. } => job,
        }
    }
}

#[derive(Debug, Clone)]
pub struct HostInfo {
    pub worker_image_digest: Digest,
    pub hostname: String,
    pub cpu_model: String,
    pub total_memory_bytes: u64,
}

/// Best-effort host description, read once per process. Without a container
/// the image digest is the digest of the running executable.
pub fn host_info() -> &'static HostInfo {
    static INFO: OnceLock<HostInfo> = OnceLock::new();
    INFO.get_or_init(|| {
        let image = std::env::current_exe()
            .and_then(std::fs::read)
            .map(|b| compute_digest(&b))
            .unwrap_or_else(|_| compute_digest(env!("CARGO_PKG_NAME").as_bytes()));
        let hostname = std::fs::read_to_string("/proc/sys/kernel/hostname")
            .or_else(|_| std::fs::read_to_string("/etc/hostname"))
            .map(|s| s.trim().to_owned())
            .ok()
            .filter(|s| !s.is_empty())
            .or_else(|| std::env::var("HOSTNAME").ok())
            .unwrap_or_else(|| "unknown".to_owned());
        let cpu_model = std::fs::read_to_string("/proc/cpuinfo")
            .ok()
            .and_then(|s| {
                s.lines()
                    .find(|l| l.starts_with("model name"))
                    .and_then(|l| l.split_once(':'))
                    .map(|(_, v)| v.trim().to_owned())
            })
            .unwrap_or_else(|| std::env::consts::ARCH.to_owned());
        let total_memory_bytes = std::fs::read_to_string("/proc/meminfo")
            .ok()
            .and_then(|s| {
                s.lines()
                    .find(|l| l.starts_with("MemTotal:"))
                    .and_then(|l| l.split_whitespace().nth(1))
                    .and_then(|kb| kb.parse::<u64>().ok())
            })
            .map(|kb| kb * 1024)
            .unwrap_or(0);
        HostInfo {
            worker_image_digest: image,
            hostname,
            cpu_model,
            total_memory_bytes,
        }
    })
}

pub struct Worker {
    pub id: String,
    orchestrator: Arc<Orchestrator>,
    storage: Arc<Storage>,
    keys: Arc<dyn KeySource>,
    latest_scan: Option<Arc<LatestScan>>,
    clock: Arc<dyn Clock>,
    /// Store a training log as an extra attested product.
    pub capture_log: bool,
}

impl Worker {
    pub fn new(id: impl Into<String>, orchestrator: Arc<Orchestrator>, keys: Arc<dyn KeySource>) -> Self {
        let storage = orchestrator.storage().clone();
        Self {
            id: id.into(),
            orchestrator,
            storage,
            keys,
            latest_scan: None,
            clock: Arc::new(SystemClock),
            capture_log: false,
        }
    }

    pub fn with_scan(mut self, latest: Arc<LatestScan>) -> Self {
        self.latest_scan = Some(latest);
        self
    }

    pub fn with_clock(mut self, clock: Arc<dyn Clock>) -> Self {
        self.clock = clock;
        self
    }

    pub fn with_log_capture(mut self, on: bool) -> Self {
        self.capture_log = on;
        self
    }

    /// Claims and runs one job. `None` when the queue is empty.
    pub fn run_once(&self) -> Result<Option<RunOutcome>, OrchestratorError> {
        match self.orchestrator.claim_job(&self.id)? {
            Some((job, lease)) => self.run_job(&job, &lease).map(Some),
            None => Ok(None),
        }
    }

    pub fn run_job(&self, job: &JobRecord, lease: &Lease) -> Result<RunOutcome, OrchestratorError> {
        let span = tracing::info_span!("job", job_id = %job.job_id, attempt = lease.attempt);
        let _guard = span.enter();
        match self.pipeline(job, lease) {
            Ok((outputs, metrics)) => {
                let job = self.orchestrator.complete_job(&job.job_id, lease, &outputs)?;
                tracing::info!("job completed");
                Ok(RunOutcome::Completed { job, metrics })
            }
            Err(error) => {
                tracing::warn!(%error, "job failed");
                let job = self.orchestrator.fail_job(&job.job_id, lease, &error.reason())?;
                Ok(RunOutcome::Failed { job, error })
            }
        }
    }

    fn fetch(&self, r: &ArtifactRef, name: &str) -> Result<Vec<u8>, WorkerError> {
        let key = ObjectKey::of(r).map_err(|e| WorkerError::step("fetch", e))?;
        let bytes = match self.storage.get_object(&key) {
            Ok(b) => b,
            Err(StorageError::IntegrityError { expected, actual, .. }) => {
                return Err(WorkerError::InputTamperDetected {
                    name: name.to_owned(),
                    expected,
                    actual,
                })
            }
            Err(e) => return Err(WorkerError::step("fetch", e)),
        };
        let actual = compute_digest(&bytes);
        if actual != r.digest {
            return Err(WorkerError::InputTamperDetected {
                name: name.to_owned(),
                expected: r.digest.clone(),
                actual,
            });
        }
        Ok(bytes)
    }

    /// Stores `bytes` under the job namespace. On a redelivered job an
    /// earlier attempt may already have written the name; the stored object
    /// is then adopted so the attestation describes what storage holds.
    fn store(&self, job_id: &str, name: &str, bytes: &[u8], step: &'static str) -> Result<(ArtifactRef, Vec<u8>), WorkerError> {
        let key = ObjectKey::new(job_id, name).map_err(|e| WorkerError::step(step, e))?;
        match self.storage.put_object(&key, bytes) {
            Ok(r) => Ok((r, bytes.to_vec())),
            Err(StorageError::ImmutabilityViolation(_)) => {
                let existing = self.storage.get_object(&key).map_err(|e| WorkerError::step(step, e))?;
                let r = self.storage.stat(&key).ok_or_else(|| WorkerError::step(step, "object vanished"))?;
                tracing::info!(%key, "adopting output of an earlier attempt");
                Ok((r, existing))
            }
            Err(e) => Err(WorkerError::step(step, e)),
        }
    }

    fn pipeline(&self, job: &JobRecord, lease: &Lease) -> Result<(Vec<ArtifactRef>, TrainingMetrics), WorkerError> {
        let spec = &job.spec;
        let job_id = job.job_id.as_str();

        // 1. fetch inputs and re-verify their digests
        let dataset_bytes = self.fetch(&spec.dataset, outputs::DATASET)?;
        let base_bytes = match &spec.base_model {
            Some(r) => Some(self.fetch(r, outputs::BASE_MODEL)?),
            None => None,
        };
        self.storage
            .create_namespace(job_id, &spec.submitter)
            .map_err(|e| WorkerError::step("fetch", e))?;
        let mut materials = vec![self.store(job_id, outputs::DATASET, &dataset_bytes, "fetch")?.0];
        if let Some(b) = &base_bytes {
            materials.push(self.store(job_id, outputs::BASE_MODEL, b, "fetch")?.0);
        }

        // 2. parse
        let dataset = trainer::parse_dataset(&dataset_bytes).map_err(|e| WorkerError::step("parse", e))?;
        let init = base_bytes
            .as_deref()
            .map(trainer::parse_model)
            .transpose()
            .map_err(|e| WorkerError::step("parse", e))?;

        // 3. environment
        let host = host_info();
        let scan = self.latest_scan.as_ref().and_then(|s| s.get());
        let mut env = EnvironmentSnapshot {
            worker_image_digest: host.worker_image_digest.clone(),
            platform_version: env!("CARGO_PKG_VERSION").to_owned(),
            hostname: host.hostname.clone(),
            cpu_model: host.cpu_model.clone(),
            total_memory_bytes: host.total_memory_bytes,
            wall_clock_start: self.clock.now(),
            wall_clock_end: self.clock.now(),
            scanner_report_ref: scan.as_ref().map(|(r, _)| r.clone()),
        };

        // 4. train
        let (model, mut metrics) =
            trainer::train_from(&dataset, &spec.config, init).map_err(|e| WorkerError::step("train", e))?;
        env.wall_clock_end = self.clock.now().max(env.wall_clock_start);

        // 5. serialize
        let model_bytes = trainer::serialize_model(&model);
        let metrics_bytes = metrics
            .to_document(&spec.config)
            .and_then(|d| canonical::to_canonical_bytes(&d))
            .map_err(|e| WorkerError::step("serialize", e))?;
        let log_bytes = self.capture_log.then(|| training_log(&metrics));

        // 6. upload
        let mut products = vec![
            self.store(job_id, outputs::MODEL, &model_bytes, "upload")?.0,
            self.store(job_id, outputs::METRICS, &metrics_bytes, "upload")?.0,
        ];
        if let Some(log) = &log_bytes {
            products.push(self.store(job_id, outputs::TRAINING_LOG, log, "upload")?.0);
        }

        let attest_started = Instant::now();

        // 7. hash: storage already returned content digests; re-hash what was
        // uploaded so the link is bound to these exact bytes
        for p in materials.iter().chain(products.iter()) {
            let key = ObjectKey::of(p).map_err(|e| WorkerError::step("hash", e))?;
            let bytes = self.storage.get_object(&key).map_err(|e| WorkerError::step("hash", e))?;
            if compute_digest(&bytes) != p.digest {
                return Err(WorkerError::step("hash", format!("{key} changed after upload")));
            }
        }

        // 8. link
        let link = create_link(job, &env, &materials, &products).map_err(|e| WorkerError::step("attest", e))?;
        let key = self.keys.signing_key().map_err(|e| WorkerError::step("sign", e))?;
        let envelope = sign_envelope(&link, LINK_PAYLOAD_TYPE, &key).map_err(|e| WorkerError::step("sign", e))?;
        let (link_ref, _) = self.store(job_id, &outputs::link_name(job_id), &envelope.to_bytes(), "upload")?;

        // 9. AIBOM
        let mut view = job.clone();
        view.outputs = products.clone();
        let doc = generate_aibom(&view, &link_ref, &env, &metrics, scan.as_ref().map(|(_, r)| r))
            .and_then(|d| embed_signature(d, &key))
            .and_then(|d| d.to_bytes())
            .map_err(|e| WorkerError::step("aibom", e))?;
        let (aibom_ref, _) = self.store(job_id, &outputs::aibom_name(job_id), &doc, "upload")?;
        metrics.aibom_generation_seconds = attest_started.elapsed().as_secs_f64();

        let mut all = products;
        all.push(link_ref);
        all.push(aibom_ref);
        debug_assert_eq!(lease.job_id, job_id);
        Ok((all, metrics))
    }
}

fn training_log(metrics: &TrainingMetrics) -> Vec<u8> {
    let mut out = String::new();
    for (i, l) in metrics.loss_per_epoch.iter().enumerate() {
        let l = canonical::decimal_string(*l).unwrap_or_else(|_| "nan".to_owned());
        out.push_str(&format!("epoch {} loss {l}\n", i + 1));
    }
    out.into_bytes()
}

/// N worker threads polling the orchestrator until stopped.
pub struct WorkerPool {
    stop: Arc<AtomicBool>,
    handles: Vec<JoinHandle<()>>,
}

impl WorkerPool {
    pub fn spawn(workers: Vec<Worker>, poll_interval: Duration) -> Self {
        let stop = Arc::new(AtomicBool::new(false));
        let handles = workers
            .into_iter()
            .map(|w| {
                let stop = stop.clone();
                std::thread::Builder::new()
                    .name(format!("worker-{}", w.id))
                    .spawn(move || {
                        while !stop.load(Ordering::Relaxed) {
                            match w.run_once() {
                                Ok(Some(_)) => {}
                                Ok(None) => std::thread::sleep(poll_interval),
                                Err(e) => {
                                    tracing::error!(worker = %w.id, error = %e, "worker loop error");
                                    std::thread::sleep(poll_interval);
                                }
                            }
                        }
                    })
                    .expect("spawn worker thread")
            })
            .collect();
        Self { stop, handles }
    }

    pub fn stop(mut self) {
        self.shutdown();
    }

    fn shutdown(&mut self) {
        self.stop.store(true, Ordering::Relaxed);
        for h in self.handles.drain(..) {
            let _ = h.join();
        }
    }
}

impl Drop for WorkerPool {
    fn drop(&mut self) {
        self.shutdown();
    }
}
