//! Durable job queue with worker leases and at-least-once delivery.
//!
//! Jobs move SUBMITTED → RUNNING → {COMPLETED, FAILED} and nowhere else. A
//! claimed job carries a lease; if the lease runs out before the worker
//! reports back the job is handed out again with `attempt + 1`, up to
//! `max_attempts`, after which it fails with "retries exhausted".
//!
//! With a state directory configured every mutation is persisted before it
//! returns: `state/jobs/<job_id>.json` and `state/queue/<job_id>.json`, both
//! canonical JSON written with temp-then-rename.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use chrono::{DateTime, Duration, Utc};
use serde::{Deserialize, Serialize};

use crate::canonical;
use crate::clock::{Clock, SystemClock};
use crate::digest::Digest;
use crate::model::{outputs, ArtifactRef, FieldError, JobRecord, JobSpec, JobState, TrainingConfig};
use crate::storage::{ObjectKey, Storage, StorageError};
use crate::trainer;

pub const DEFAULT_LEASE_SECONDS: i64 = 300;
pub const DEFAULT_MAX_ATTEMPTS: u32 = 3;
pub const RETRIES_EXHAUSTED: &str = "retries exhausted";

/// Reference to an uploaded object, as submitted by a client.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObjectRef {
    pub namespace: String,
    pub name: String,
    /// When given, the stored object must have exactly this digest.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub digest: Option<Digest>,
}

impl ObjectRef {
    /// Parses `namespace/name[@sha256:hex]`.
    pub fn parse(text: &str) -> Result<Self, String> {
        let (path, digest) = match text.split_once('@') {
            Some((p, d)) => (p, Some(d.parse::<Digest>().map_err(|e| e.to_string())?)),
            None => (text, None),
        };
        let (namespace, name) = path
            .split_once('/')
            .ok_or_else(|| format!("{text:?} is not of the form <namespace>/<name>[@sha256:<hex>]"))?;
        Ok(Self {
            namespace: namespace.to_owned(),
            name: name.to_owned(),
            digest,
        })
    }
}

impl std::fmt::Display for ObjectRef {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}/{}", self.namespace, self.name)?;
        if let Some(d) = &self.digest {
            write!(f, "@{d}")?;
        }
        Ok(())
    }
}

impl From<&ArtifactRef> for ObjectRef {
    fn from(a: &ArtifactRef) -> Self {
        Self {
            namespace: a.namespace.clone().unwrap_or_default(),
            name: a.name.clone(),
            digest: Some(a.digest.clone()),
        }
    }
}

/// Body of a job submission. Only data references and numeric parameters;
/// nothing in it is ever executed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JobRequest {
    pub dataset: ObjectRef,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub base_model: Option<ObjectRef>,
    pub config: TrainingConfig,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Lease {
    pub job_id: String,
    pub worker_id: String,
    pub attempt: u32,
    pub token: String,
    pub expires_at: DateTime<Utc>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueueEntry {
    pub job_id: String,
    pub seq: u64,
    pub enqueued_at: DateTime<Utc>,
    /// Number of deliveries so far; 0 until first claimed.
    pub attempt: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lease: Option<Lease>,
}

impl QueueEntry {
    pub fn visibility_deadline(&self) -> Option<DateTime<Utc>> {
        self.lease.as_ref().map(|l| l.expires_at)
    }
}

#[derive(Debug, thiserror::Error)]
pub enum OrchestratorError {
    #[error("validation failed: {}", .0.iter().map(ToString::to_string).collect::<Vec<_>>().join(", "))]
    ValidationFailed(Vec<FieldError>),
    #[error("principal is not allowed to access this job")]
    Unauthorized,
    #[error("job {0} not found")]
    NotFound(String),
    #[error("completion refused, missing attestation outputs: {}", .0.join(", "))]
    MissingAttestation(Vec<String>),
    #[error("completion refused, missing outputs: {}", .0.join(", "))]
    MissingOutputs(Vec<String>),
    #[error("lease is stale or does not belong to this job")]
    StaleLease,
    #[error("job {0} already finished")]
    AlreadyFinished(String),
    #[error("cannot persist orchestrator state: {0}")]
    Persistence(#[from] std::io::Error),
    #[error("corrupt orchestrator state in {0}")]
    CorruptState(String),
}

impl OrchestratorError {
    pub fn fields(&self) -> Vec<&str> {
        match self {
            OrchestratorError::ValidationFailed(f) => f.iter().map(|e| e.field.as_str()).collect(),
            _ => Vec::new(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct OrchestratorConfig {
    /// `None` keeps everything in memory.
    pub state_dir: Option<PathBuf>,
    pub lease_duration: Duration,
    pub max_attempts: u32,
}

impl Default for OrchestratorConfig {
    fn default() -> Self {
        Self {
            state_dir: None,
            lease_duration: Duration::seconds(DEFAULT_LEASE_SECONDS),
            max_attempts: DEFAULT_MAX_ATTEMPTS,
        }
    }
}

#[derive(Default)]
struct State {
    jobs: HashMap<String, JobRecord>,
    queue: BTreeMap<String, QueueEntry>,
    next_seq: u64,
}

pub struct Orchestrator {
    config: OrchestratorConfig,
    storage: Arc<Storage>,
    clock: Arc<dyn Clock>,
    state: Mutex<State>,
}

impl Orchestrator {
    pub fn open(config: OrchestratorConfig, storage: Arc<Storage>) -> Result<Self, OrchestratorError> {
        Self::open_with_clock(config, storage, Arc::new(SystemClock))
    }

    pub fn open_with_clock(
        config: OrchestratorConfig,
        storage: Arc<Storage>,
        clock: Arc<dyn Clock>,
    ) -> Result<Self, OrchestratorError> {
        let mut state = State::default();
        if let Some(dir) = &config.state_dir {
            fs::create_dir_all(dir.join("jobs"))?;
            fs::create_dir_all(dir.join("queue"))?;
            for job in load_dir::<JobRecord>(&dir.join("jobs"))? {
                state.jobs.insert(job.job_id.clone(), job);
            }
            for entry in load_dir::<QueueEntry>(&dir.join("queue"))? {
                state.next_seq = state.next_seq.max(entry.seq + 1);
                state.queue.insert(entry.job_id.clone(), entry);
            }
        }
        Ok(Self {
            config,
            storage,
            clock,
            state: Mutex::new(state),
        })
    }

    pub fn config(&self) -> &OrchestratorConfig {
        &self.config
    }

    pub fn storage(&self) -> &Arc<Storage> {
        &self.storage
    }

    fn resolve(
        &self,
        field: &str,
        r: &ObjectRef,
        principal: &str,
        errors: &mut Vec<FieldError>,
    ) -> Result<Option<(ArtifactRef, Vec<u8>)>, OrchestratorError> {
        let key = match ObjectKey::new(&r.namespace, &r.name) {
            Ok(k) => k,
            Err(e) => {
                errors.push(FieldError::new(field, e.to_string()));
                return Ok(None);
            }
        };
        match self.storage.owner(&key.namespace) {
            None => {
                errors.push(FieldError::new(field, format!("{key} does not exist")));
                return Ok(None);
            }
            Some(owner) if owner != principal => return Err(OrchestratorError::Unauthorized),
            Some(_) => {}
        }
        let Some(stored) = self.storage.stat(&key) else {
            errors.push(FieldError::new(field, format!("{key} does not exist")));
            return Ok(None);
        };
        if let Some(d) = &r.digest {
            if *d != stored.digest {
                errors.push(FieldError::new(field, format!("{key} has digest {}, not {d}", stored.digest)));
                return Ok(None);
            }
        }
        match self.storage.get_object(&key) {
            Ok(bytes) => Ok(Some((stored, bytes))),
            Err(e @ StorageError::IntegrityError { .. }) => {
                errors.push(FieldError::new(field, e.to_string()));
                Ok(None)
            }
            Err(e) => {
                errors.push(FieldError::new(field, e.to_string()));
                Ok(None)
            }
        }
    }

    /// Validates the request, resolves its inputs and queues the job.
    pub fn submit_job(&self, request: &JobRequest, principal: &str) -> Result<JobRecord, OrchestratorError> {
        if principal.is_empty() {
            return Err(OrchestratorError::Unauthorized);
        }
        let mut errors = request.config.validate();
        let dataset = self.resolve("dataset", &request.dataset, principal, &mut errors)?;
        if let Some((_, bytes)) = &dataset {
            if let Err(e) = trainer::check_csv_header(bytes) {
                errors.push(FieldError::new("dataset", e.to_string()));
            }
        }
        let base_model = match &request.base_model {
            Some(r) => {
                let resolved = self.resolve("base_model", r, principal, &mut errors)?;
                if let Some((_, bytes)) = &resolved {
                    if let Err(e) = trainer::parse_model(bytes) {
                        errors.push(FieldError::new("base_model", e.to_string()));
                    }
                }
                resolved.map(|(r, _)| r)
            }
            None => None,
        };
        if !errors.is_empty() {
            return Err(OrchestratorError::ValidationFailed(errors));
        }
        let (dataset, _) = dataset.expect("no errors means the dataset resolved");
        let spec = JobSpec {
            dataset,
            base_model,
            config: request.config.clone(),
            submitter: principal.to_owned(),
        };
        self.enqueue(spec)
    }

    /// Queues an already-resolved spec.
    pub fn enqueue(&self, spec: JobSpec) -> Result<JobRecord, OrchestratorError> {
        let now = self.clock.now();
        let job = JobRecord {
            job_id: uuid::Uuid::new_v4().to_string(),
            spec,
            state: JobState::Submitted,
            created_at: now,
            started_at: None,
            finished_at: None,
            outputs: Vec::new(),
            failure_reason: None,
            attempts: 0,
        };
        let mut state = self.state.lock().unwrap();
        let entry = QueueEntry {
            job_id: job.job_id.clone(),
            seq: state.next_seq,
            enqueued_at: now,
            attempt: 0,
            lease: None,
        };
        self.persist_job(&job)?;
        self.persist_entry(&entry)?;
        state.next_seq += 1;
        state.queue.insert(job.job_id.clone(), entry);
        state.jobs.insert(job.job_id.clone(), job.clone());
        Ok(job)
    }

    /// Expires stale leases: redelivers or fails their jobs.
    fn reap(&self, state: &mut State, now: DateTime<Utc>) -> Result<(), OrchestratorError> {
        let expired: Vec<String> = state
            .queue
            .values()
            .filter(|e| e.lease.as_ref().is_some_and(|l| l.expires_at <= now))
            .map(|e| e.job_id.clone())
            .collect();
        for job_id in expired {
            let entry = state.queue.get_mut(&job_id).expect("listed above");
            entry.lease = None;
            if entry.attempt >= self.config.max_attempts {
                let job = state.jobs.get_mut(&job_id).expect("queued jobs exist");
                finish(job, JobState::Failed, now);
                job.failure_reason = Some(RETRIES_EXHAUSTED.to_owned());
                self.persist_job(job)?;
                self.remove_entry(&job_id)?;
                state.queue.remove(&job_id);
            } else {
                self.persist_entry(entry)?;
            }
        }
        Ok(())
    }

    /// Hands the oldest available job to `worker_id`, or `None` if nothing is
    /// available.
    pub fn claim_job(&self, worker_id: &str) -> Result<Option<(JobRecord, Lease)>, OrchestratorError> {
        let now = self.clock.now();
        let mut state = self.state.lock().unwrap();
        self.reap(&mut state, now)?;
        let Some(job_id) = state
            .queue
            .values()
            .filter(|e| e.lease.is_none())
            .min_by_key(|e| e.seq)
            .map(|e| e.job_id.clone())
        else {
            return Ok(None);
        };

        let entry = state.queue.get_mut(&job_id).expect("just found");
        entry.attempt += 1;
        let lease = Lease {
            job_id: job_id.clone(),
            worker_id: worker_id.to_owned(),
            attempt: entry.attempt,
            token: uuid::Uuid::new_v4().to_string(),
            expires_at: now + self.config.lease_duration,
        };
        entry.lease = Some(lease.clone());
        let entry = entry.clone();

        let job = state.jobs.get_mut(&job_id).expect("queued jobs exist");
        if job.state == JobState::Submitted {
            job.state = JobState::Running;
            job.started_at = Some(now);
        }
        job.attempts = lease.attempt;
        let job = job.clone();
        self.persist_entry(&entry)?;
        self.persist_job(&job)?;
        Ok(Some((job, lease)))
    }

    fn check_lease(&self, state: &State, lease: &Lease, now: DateTime<Utc>) -> Result<(), OrchestratorError> {
        let live = state
            .queue
            .get(&lease.job_id)
            .and_then(|e| e.lease.as_ref())
            .is_some_and(|l| l.token == lease.token && l.expires_at > now);
        if live {
            Ok(())
        } else {
            Err(OrchestratorError::StaleLease)
        }
    }

    /// Records outputs and completes the job. Refused unless the outputs
    /// include the signed link and AIBOM.
    pub fn complete_job(
        &self,
        job_id: &str,
        lease: &Lease,
        outputs: &[ArtifactRef],
    ) -> Result<JobRecord, OrchestratorError> {
        let now = self.clock.now();
        let mut state = self.state.lock().unwrap();
        let job = state
            .jobs
            .get(job_id)
            .ok_or_else(|| OrchestratorError::NotFound(job_id.to_owned()))?;
        match job.state {
            JobState::Completed if job.outputs == outputs => return Ok(job.clone()),
            JobState::Completed | JobState::Failed => {
                return Err(OrchestratorError::AlreadyFinished(job_id.to_owned()))
            }
            _ => {}
        }
        if lease.job_id != job_id {
            return Err(OrchestratorError::StaleLease);
        }
        self.check_lease(&state, lease, now)?;

        let has = |name: &str| outputs.iter().any(|o| o.name == name);
        let missing_attestations: Vec<String> = [outputs::link_name(job_id), outputs::aibom_name(job_id)]
            .into_iter()
            .filter(|n| !has(n))
            .collect();
        if !missing_attestations.is_empty() {
            return Err(OrchestratorError::MissingAttestation(missing_attestations));
        }
        let missing: Vec<String> = [outputs::MODEL, outputs::METRICS]
            .into_iter()
            .filter(|n| !has(n))
            .map(str::to_owned)
            .collect();
        if !missing.is_empty() {
            return Err(OrchestratorError::MissingOutputs(missing));
        }

        let job = state.jobs.get_mut(job_id).expect("checked above");
        finish(job, JobState::Completed, now);
        job.outputs = outputs.to_vec();
        let job = job.clone();
        self.persist_job(&job)?;
        self.remove_entry(job_id)?;
        state.queue.remove(job_id);
        Ok(job)
    }

    pub fn fail_job(&self, job_id: &str, lease: &Lease, reason: &str) -> Result<JobRecord, OrchestratorError> {
        let now = self.clock.now();
        let mut state = self.state.lock().unwrap();
        let job = state
            .jobs
            .get(job_id)
            .ok_or_else(|| OrchestratorError::NotFound(job_id.to_owned()))?;
        if job.state.is_terminal() {
            return Err(OrchestratorError::AlreadyFinished(job_id.to_owned()));
        }
        if lease.job_id != job_id {
            return Err(OrchestratorError::StaleLease);
        }
        self.check_lease(&state, lease, now)?;
        let job = state.jobs.get_mut(job_id).expect("checked above");
        finish(job, JobState::Failed, now);
        job.failure_reason = Some(reason.to_owned());
        let job = job.clone();
        self.persist_job(&job)?;
        self.remove_entry(job_id)?;
        state.queue.remove(job_id);
        Ok(job)
    }

    /// Owner-only view of a job.
    pub fn job_status(&self, job_id: &str, principal: &str) -> Result<JobRecord, OrchestratorError> {
        let job = self.get(job_id).ok_or_else(|| OrchestratorError::NotFound(job_id.to_owned()))?;
        if job.spec.submitter != principal {
            return Err(OrchestratorError::Unauthorized);
        }
        Ok(job)
    }

    /// Unchecked lookup for platform-internal callers.
    pub fn get(&self, job_id: &str) -> Option<JobRecord> {
        self.state.lock().unwrap().jobs.get(job_id).cloned()
    }

    pub fn jobs(&self) -> Vec<JobRecord> {
        let mut jobs: Vec<_> = self.state.lock().unwrap().jobs.values().cloned().collect();
        jobs.sort_by(|a, b| a.created_at.cmp(&b.created_at).then(a.job_id.cmp(&b.job_id)));
        jobs
    }

    pub fn queue(&self) -> Vec<QueueEntry> {
        let mut q: Vec<_> = self.state.lock().unwrap().queue.values().cloned().collect();
        q.sort_by_key(|e| e.seq);
        q
    }

    /// Runs lease expiry without claiming anything.
    pub fn expire_leases(&self) -> Result<(), OrchestratorError> {
        let now = self.clock.now();
        let mut state = self.state.lock().unwrap();
        self.reap(&mut state, now)
    }

    fn persist_job(&self, job: &JobRecord) -> Result<(), OrchestratorError> {
        if let Some(dir) = &self.config.state_dir {
            let bytes = canonical::to_canonical_bytes(job)
                .map_err(|e| OrchestratorError::CorruptState(e.to_string()))?;
            write_atomic(&dir.join("jobs").join(format!("{}.json", job.job_id)), &bytes)?;
        }
        Ok(())
    }

    fn persist_entry(&self, entry: &QueueEntry) -> Result<(), OrchestratorError> {
        if let Some(dir) = &self.config.state_dir {
            let bytes = canonical::to_canonical_bytes(entry).expect("queue entries hold no floats");
            write_atomic(&dir.join("queue").join(format!("{}.json", entry.job_id)), &bytes)?;
        }
        Ok(())
    }

    fn remove_entry(&self, job_id: &str) -> Result<(), OrchestratorError> {
        if let Some(dir) = &self.config.state_dir {
            match fs::remove_file(dir.join("queue").join(format!("{job_id}.json"))) {
                Err(e) if e.kind() != std::io::ErrorKind::NotFound => return Err(e.into()),
                _ => {}
            }
        }
        Ok(())
    }
}

fn finish(job: &mut JobRecord, to: JobState, now: DateTime<Utc>) {
    debug_assert!(job.state.can_transition_to(to), "{} -> {to}", job.state);
    job.state = to;
    job.finished_at = Some(now);
}

fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let tmp = path.with_extension(format!("tmp-{}", uuid::Uuid::new_v4().simple()));
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)
}

fn load_dir<T: serde::de::DeserializeOwned>(dir: &Path) -> Result<Vec<T>, OrchestratorError> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        if path.extension().and_then(|e| e.to_str()) != Some("json") {
            continue;
        }
        let bytes = fs::read(&path)?;
        out.push(serde_json::from_slice(&bytes).map_err(|_| OrchestratorError::CorruptState(path.display().to_string()))?);
    }
    Ok(out)
}
