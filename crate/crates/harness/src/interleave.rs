//! Random orchestrator operation sequences checked against a reference model.
//!
//! Each sequence drives a fresh in-memory orchestrator under a manual clock.
//! After every operation the observed job states must agree with the model,
//! every state change must be a legal transition, and no COMPLETED job may
//! lack its link and AIBOM outputs.

use std::collections::BTreeMap;
use std::sync::Arc;

use aibomgen_core::clock::{Clock, ManualClock};
use aibomgen_core::model::outputs;
use aibomgen_core::orchestrator::{JobRequest, Lease, ObjectRef, Orchestrator, OrchestratorConfig, OrchestratorError};
use aibomgen_core::storage::{ObjectKey, Storage, StorageConfig};
use aibomgen_core::{compute_digest, ArtifactRef, JobState, Task, TrainingConfig};
use chrono::{DateTime, Duration, Utc};
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

use crate::fixtures;

const OWNER: &str = "alice";
const INTRUDER: &str = "mallory";
const WORKERS: [&str; 3] = ["w0", "w1", "w2"];

#[derive(Debug, Clone, Default)]
pub struct InterleavingReport {
    pub sequences: usize,
    pub operations: usize,
    pub completed: usize,
    pub failed: usize,
    pub exhausted: usize,
    pub violations: Vec<String>,
}

impl InterleavingReport {
    pub fn passed(&self) -> bool {
        self.violations.is_empty()
    }
}

#[derive(Debug, Clone, Copy)]
enum OutputSet {
    Full,
    FullWithLog,
    FullAlternate,
    NoAibom,
    NoLink,
    NoModel,
    NoMetrics,
    Empty,
}

const OUTPUT_SETS: [OutputSet; 8] = [
    OutputSet::Full,
    OutputSet::FullWithLog,
    OutputSet::FullAlternate,
    OutputSet::NoAibom,
    OutputSet::NoLink,
    OutputSet::NoModel,
    OutputSet::NoMetrics,
    OutputSet::Empty,
];

fn output_refs(job_id: &str, set: OutputSet) -> Vec<ArtifactRef> {
    let mut names = vec![
        outputs::DATASET.to_owned(),
        outputs::MODEL.to_owned(),
        outputs::METRICS.to_owned(),
        outputs::link_name(job_id),
        outputs::aibom_name(job_id),
    ];
    let drop = |names: &mut Vec<String>, n: &str| names.retain(|x| x != n);
    match set {
        OutputSet::Full | OutputSet::FullAlternate => {}
        OutputSet::FullWithLog => names.push(outputs::TRAINING_LOG.to_owned()),
        OutputSet::NoAibom => drop(&mut names, &outputs::aibom_name(job_id)),
        OutputSet::NoLink => drop(&mut names, &outputs::link_name(job_id)),
        OutputSet::NoModel => drop(&mut names, outputs::MODEL),
        OutputSet::NoMetrics => drop(&mut names, outputs::METRICS),
        OutputSet::Empty => names.clear(),
    }
    let salt = if matches!(set, OutputSet::FullAlternate) { "alt" } else { "" };
    names
        .into_iter()
        .map(|n| {
            let digest = compute_digest(format!("{job_id}/{n}{salt}").as_bytes());
            ArtifactRef::new(n.clone(), digest, 1, "application/octet-stream").in_namespace(job_id)
        })
        .collect()
}

#[derive(Debug, Clone)]
struct ModelJob {
    state: JobState,
    seq: u64,
    attempt: u32,
    lease: Option<(String, DateTime<Utc>)>,
    outputs: Vec<ArtifactRef>,
}

struct Model {
    jobs: BTreeMap<String, ModelJob>,
    next_seq: u64,
    max_attempts: u32,
}

impl Model {
    fn reap(&mut self, now: DateTime<Utc>) {
        for job in self.jobs.values_mut().filter(|j| !j.state.is_terminal()) {
            if job.lease.as_ref().is_some_and(|(_, exp)| *exp <= now) {
                job.lease = None;
                if job.attempt >= self.max_attempts {
                    job.state = JobState::Failed;
                }
            }
        }
    }

    fn next_claim(&self) -> Option<String> {
        self.jobs
            .iter()
            .filter(|(_, j)| !j.state.is_terminal() && j.lease.is_none())
            .min_by_key(|(_, j)| j.seq)
            .map(|(id, _)| id.clone())
    }

    fn live(&self, lease: &Lease, now: DateTime<Utc>) -> bool {
        self.jobs
            .get(&lease.job_id)
            .and_then(|j| j.lease.as_ref())
            .is_some_and(|(token, exp)| *token == lease.token && *exp > now)
    }

    fn predict_complete(&self, lease: &Lease, outs: &[ArtifactRef], now: DateTime<Utc>) -> &'static str {
        let job = &self.jobs[&lease.job_id];
        match job.state {
            JobState::Completed if job.outputs == outs => return "ok",
            JobState::Completed | JobState::Failed => return "already_finished",
            _ => {}
        }
        if !self.live(lease, now) {
            return "stale_lease";
        }
        let has = |n: &str| outs.iter().any(|o| o.name == n);
        if !has(&outputs::link_name(&lease.job_id)) || !has(&outputs::aibom_name(&lease.job_id)) {
            return "missing_attestation";
        }
        if !has(outputs::MODEL) || !has(outputs::METRICS) {
            return "missing_outputs";
        }
        "ok"
    }

    fn predict_fail(&self, lease: &Lease, now: DateTime<Utc>) -> &'static str {
        if self.jobs[&lease.job_id].state.is_terminal() {
            "already_finished"
        } else if !self.live(lease, now) {
            "stale_lease"
        } else {
            "ok"
        }
    }
}

fn kind<T>(r: &Result<T, OrchestratorError>) -> &'static str {
    match r {
        Ok(_) => "ok",
        Err(OrchestratorError::ValidationFailed(_)) => "validation_failed",
        Err(OrchestratorError::Unauthorized) => "unauthorized",
        Err(OrchestratorError::NotFound(_)) => "not_found",
        Err(OrchestratorError::MissingAttestation(_)) => "missing_attestation",
        Err(OrchestratorError::MissingOutputs(_)) => "missing_outputs",
        Err(OrchestratorError::StaleLease) => "stale_lease",
        Err(OrchestratorError::AlreadyFinished(_)) => "already_finished",
        Err(OrchestratorError::Persistence(_)) => "persistence",
        Err(OrchestratorError::CorruptState(_)) => "corrupt_state",
    }
}

struct Sequence<'a> {
    orch: Orchestrator,
    clock: Arc<ManualClock>,
    model: Model,
    leases: Vec<Lease>,
    observed: BTreeMap<String, JobState>,
    request: &'a JobRequest,
    rng: StdRng,
    log: Vec<String>,
}

impl Sequence<'_> {
    fn expect(&self, op: &str, want: &str, got: &str) -> Result<(), String> {
        if want == got {
            Ok(())
        } else {
            Err(format!("{op}: model expected {want}, orchestrator returned {got}"))
        }
    }

    fn step(&mut self) -> Result<(), String> {
        let now = self.clock.now();
        let roll = self.rng.gen_range(0..100);
        match roll {
            0..=14 => {
                let r = self.orch.submit_job(self.request, OWNER);
                self.expect("submit", "ok", kind(&r))?;
                let job = r.expect("checked ok");
                self.log.push(format!("submit {}", job.job_id));
                self.model.jobs.insert(
                    job.job_id.clone(),
                    ModelJob {
                        state: JobState::Submitted,
                        seq: self.model.next_seq,
                        attempt: 0,
                        lease: None,
                        outputs: Vec::new(),
                    },
                );
                self.model.next_seq += 1;
            }
            15..=17 => {
                let mut bad = self.request.clone();
                bad.config.epochs = self.rng.gen_range(-5..=-1);
                let r = self.orch.submit_job(&bad, OWNER);
                self.log.push("submit invalid".into());
                self.expect("submit invalid", "validation_failed", kind(&r))?;
            }
            18..=19 => {
                let r = self.orch.submit_job(self.request, INTRUDER);
                self.log.push("submit foreign dataset".into());
                self.expect("submit foreign dataset", "unauthorized", kind(&r))?;
                if let Some(id) = self.model.jobs.keys().next().cloned() {
                    let r = self.orch.job_status(&id, INTRUDER);
                    self.expect("status by intruder", "unauthorized", kind(&r))?;
                }
                let r = self.orch.job_status("no-such-job", OWNER);
                self.expect("status unknown", "not_found", kind(&r))?;
            }
            20..=44 => {
                let worker = WORKERS[self.rng.gen_range(0..WORKERS.len())];
                self.model.reap(now);
                let want = self.model.next_claim();
                let r = self.orch.claim_job(worker);
                self.expect("claim", "ok", kind(&r))?;
                let got = r.expect("checked ok");
                let got_id = got.as_ref().map(|(j, _)| j.job_id.clone());
                self.log.push(format!("claim {worker} -> {got_id:?}"));
                if want != got_id {
                    return Err(format!("claim: model expected {want:?}, orchestrator handed out {got_id:?}"));
                }
                if let Some((job, lease)) = got {
                    let m = self.model.jobs.get_mut(&job.job_id).expect("model knows every job");
                    m.attempt += 1;
                    if lease.attempt != m.attempt || job.attempts != m.attempt {
                        return Err(format!("claim: attempt {} but model counts {}", lease.attempt, m.attempt));
                    }
                    if lease.expires_at <= now {
                        return Err("claim: lease already expired".into());
                    }
                    m.state = JobState::Running;
                    m.lease = Some((lease.token.clone(), lease.expires_at));
                    self.leases.push(lease);
                }
            }
            45..=69 => {
                let Some(lease) = self.pick_lease() else { return Ok(()) };
                let set = OUTPUT_SETS[self.rng.gen_range(0..OUTPUT_SETS.len())];
                let outs = output_refs(&lease.job_id, set);
                let want = self.model.predict_complete(&lease, &outs, now);
                let r = self.orch.complete_job(&lease.job_id, &lease, &outs);
                self.log.push(format!("complete {} {set:?}", lease.job_id));
                self.expect("complete", want, kind(&r))?;
                if want == "ok" {
                    let m = self.model.jobs.get_mut(&lease.job_id).expect("model knows every job");
                    m.state = JobState::Completed;
                    m.lease = None;
                    m.outputs = outs;
                }
            }
            70..=77 => {
                let Some(lease) = self.pick_lease() else { return Ok(()) };
                let want = self.model.predict_fail(&lease, now);
                let r = self.orch.fail_job(&lease.job_id, &lease, "step failed");
                self.log.push(format!("fail {}", lease.job_id));
                self.expect("fail", want, kind(&r))?;
                if want == "ok" {
                    let m = self.model.jobs.get_mut(&lease.job_id).expect("model knows every job");
                    m.state = JobState::Failed;
                    m.lease = None;
                }
            }
            78..=92 => {
                let secs = if self.rng.gen_bool(0.3) {
                    self.rng.gen_range(250..400)
                } else {
                    self.rng.gen_range(1..60)
                };
                self.clock.advance(Duration::seconds(secs));
                self.log.push(format!("advance {secs}s"));
            }
            _ => {
                self.model.reap(now);
                let r = self.orch.expire_leases();
                self.log.push("expire".into());
                self.expect("expire", "ok", kind(&r))?;
            }
        }
        self.check()
    }

    /// Recent leases are likelier, but stale ones keep coming back.
    fn pick_lease(&mut self) -> Option<Lease> {
        if self.leases.is_empty() {
            return None;
        }
        let n = self.leases.len();
        let i = if self.rng.gen_bool(0.7) {
            n - 1 - self.rng.gen_range(0..n.min(3))
        } else {
            self.rng.gen_range(0..n)
        };
        Some(self.leases[i].clone())
    }

    fn check(&mut self) -> Result<(), String> {
        let jobs = self.orch.jobs();
        let queued: BTreeMap<String, _> = self.orch.queue().into_iter().map(|e| (e.job_id.clone(), e)).collect();
        if jobs.len() != self.model.jobs.len() {
            return Err(format!("{} jobs recorded, model has {}", jobs.len(), self.model.jobs.len()));
        }
        for job in &jobs {
            let id = &job.job_id;
            let Some(m) = self.model.jobs.get(id) else {
                return Err(format!("{id}: unknown to the model"));
            };
            if job.state != m.state {
                return Err(format!("{id}: state {} but model says {}", job.state, m.state));
            }
            if let Some(prev) = self.observed.insert(id.clone(), job.state) {
                if prev != job.state && !prev.can_transition_to(job.state) {
                    return Err(format!("{id}: illegal transition {prev} -> {}", job.state));
                }
            } else if job.state != JobState::Submitted {
                return Err(format!("{id}: first observed as {}", job.state));
            }
            if job.state == JobState::Completed {
                let has = |n: &str| job.output(n).is_some();
                if !job.has_attestations() || !has(outputs::MODEL) || !has(outputs::METRICS) {
                    return Err(format!("{id}: COMPLETED without link, AIBOM, model and metrics"));
                }
            }
            if job.state == JobState::Failed && job.failure_reason.is_none() {
                return Err(format!("{id}: FAILED without a reason"));
            }
            if job.state.is_terminal() == queued.contains_key(id) {
                return Err(format!("{id}: {} but queued={}", job.state, queued.contains_key(id)));
            }
            if job.attempts > self.model.max_attempts {
                return Err(format!("{id}: {} attempts exceeds the limit", job.attempts));
            }
            if (job.state == JobState::Submitted) != (job.attempts == 0) {
                return Err(format!("{id}: {} with {} attempts", job.state, job.attempts));
            }
        }
        Ok(())
    }
}

/// Runs `sequences` random sequences of `ops_per_sequence` operations each.
pub fn run(sequences: usize, ops_per_sequence: usize, seed: u64) -> Result<InterleavingReport, String> {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut storage_config = StorageConfig::new(dir.path(), vec![7u8; 32]);
    storage_config.sync_writes = false;
    let storage = Arc::new(Storage::open(storage_config).map_err(|e| e.to_string())?);
    storage.create_namespace("up-model", OWNER).map_err(|e| e.to_string())?;
    let key = ObjectKey::new("up-model", "train.csv").map_err(|e| e.to_string())?;
    let dataset = storage
        .put_object(&key, &fixtures::regression_csv(8, seed))
        .map_err(|e| e.to_string())?;
    let request = JobRequest {
        dataset: ObjectRef::from(&dataset),
        base_model: None,
        config: TrainingConfig::new(Task::Regression, 3, 4, 0.1),
    };

    let mut master = StdRng::seed_from_u64(seed);
    let mut report = InterleavingReport::default();
    for s in 0..sequences {
        let start = DateTime::from_timestamp(1_750_000_000, 0).expect("valid");
        let clock = Arc::new(ManualClock::new(start));
        let config = OrchestratorConfig::default();
        let max_attempts = config.max_attempts;
        let orch = Orchestrator::open_with_clock(config, storage.clone(), clock.clone()).map_err(|e| e.to_string())?;
        let mut seq = Sequence {
            orch,
            clock,
            model: Model {
                jobs: BTreeMap::new(),
                next_seq: 0,
                max_attempts,
            },
            leases: Vec::new(),
            observed: BTreeMap::new(),
            request: &request,
            rng: StdRng::seed_from_u64(master.gen()),
            log: Vec::new(),
        };
        for _ in 0..ops_per_sequence {
            report.operations += 1;
            if let Err(v) = seq.step() {
                let tail = seq.log.iter().rev().take(6).rev().cloned().collect::<Vec<_>>().join("; ");
                report.violations.push(format!("sequence {s}: {v} (after: {tail})"));
                break;
            }
        }
        for job in seq.orch.jobs() {
            match (job.state, job.failure_reason.as_deref()) {
                (JobState::Completed, _) => report.completed += 1,
                (JobState::Failed, Some(aibomgen_core::orchestrator::RETRIES_EXHAUSTED)) => {
                    report.exhausted += 1;
                    report.failed += 1;
                }
                (JobState::Failed, _) => report.failed += 1,
                _ => {}
            }
        }
        report.sequences += 1;
    }
    Ok(report)
}
