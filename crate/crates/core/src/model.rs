//! Domain records shared by every stage of the pipeline.

use std::fmt;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::canonical::{decimal_string, CanonicalError};
use crate::digest::Digest;

/// Framework identifier recorded for every job run by the built-in trainer.
pub const FRAMEWORK_TAG: &str = "reftrainer/1";

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum NameError {
    #[error("artifact name is empty")]
    Empty,
    #[error("artifact name {0:?} is absolute")]
    Absolute(String),
    #[error("artifact name {0:?} contains a '..' segment")]
    ParentSegment(String),
    #[error("artifact name {0:?} contains forbidden characters")]
    Forbidden(String),
}

/// Normalizes a relative, path-like artifact name: collapses empty and `.`
/// segments, rejects `..`, absolute paths, backslashes and control characters.
pub fn normalize_name(name: &str) -> Result<String, NameError> {
    if name.starts_with('/') {
        return Err(NameError::Absolute(name.to_owned()));
    }
    if name.chars().any(|c| c == '\\' || c.is_control()) {
        return Err(NameError::Forbidden(name.to_owned()));
    }
    let mut segments = Vec::new();
    for seg in name.split('/') {
        match seg {
            "" | "." => continue,
            ".." => return Err(NameError::ParentSegment(name.to_owned())),
            s => segments.push(s),
        }
    }
    if segments.is_empty() {
        return Err(NameError::Empty);
    }
    Ok(segments.join("/"))
}

/// A stored (or storable) artifact identified by its content digest.
///
/// `namespace` is the storage namespace holding the bytes: a job id for job
/// inputs and outputs, an upload id for staged files. It is absent when the
/// reference only describes content.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArtifactRef {
    pub name: String,
    pub digest: Digest,
    pub size_bytes: u64,
    pub media_type: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub namespace: Option<String>,
}

impl ArtifactRef {
    pub fn new(name: impl Into<String>, digest: Digest, size_bytes: u64, media_type: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            digest,
            size_bytes,
            media_type: media_type.into(),
            namespace: None,
        }
    }

    pub fn in_namespace(mut self, namespace: impl Into<String>) -> Self {
        self.namespace = Some(namespace.into());
        self
    }
}

/// Media type guessed from the file extension.
pub fn media_type_for(name: &str) -> &'static str {
    match name.rsplit_once('.').map(|(_, ext)| ext) {
        Some("csv") => "text/csv",
        Some("json") => "application/json",
        Some("bin") | Some("rtm") => "application/octet-stream",
        Some("log") | Some("txt") => "text/plain",
        _ => "application/octet-stream",
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Regression,
    Classification,
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Task::Regression => "regression",
            Task::Classification => "classification",
        })
    }
}

impl std::str::FromStr for Task {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "regression" => Ok(Task::Regression),
            "classification" => Ok(Task::Classification),
            other => Err(format!("unknown task {other:?} (expected regression or classification)")),
        }
    }
}

/// Training hyper-parameters. Integers are signed so that out-of-range
/// submissions reach validation instead of failing deserialization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingConfig {
    pub epochs: i64,
    pub batch_size: i64,
    pub learning_rate: f64,
    pub task: Task,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_framework_tag")]
    pub framework_tag: String,
}

fn default_framework_tag() -> String {
    FRAMEWORK_TAG.to_owned()
}

/// One field-level validation failure.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FieldError {
    pub field: String,
    pub reason: String,
}

impl FieldError {
    pub fn new(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Self {
            field: field.into(),
            reason: reason.into(),
        }
    }
}

impl fmt::Display for FieldError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.field, self.reason)
    }
}

impl TrainingConfig {
    pub fn new(task: Task, epochs: i64, batch_size: i64, learning_rate: f64) -> Self {
        Self {
            epochs,
            batch_size,
            learning_rate,
            task,
            seed: 0,
            framework_tag: FRAMEWORK_TAG.to_owned(),
        }
    }

    pub fn validate(&self) -> Vec<FieldError> {
        let mut errors = Vec::new();
        if self.epochs < 0 {
            errors.push(FieldError::new("epochs", "must be >= 0"));
        }
        if self.batch_size < 1 {
            errors.push(FieldError::new("batch_size", "must be >= 1"));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            errors.push(FieldError::new("learning_rate", "must be a finite number > 0"));
        }
        if self.framework_tag != FRAMEWORK_TAG {
            errors.push(FieldError::new(
                "framework_tag",
                format!("only {FRAMEWORK_TAG:?} is available"),
            ));
        }
        errors
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobSpec {
    pub dataset: ArtifactRef,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub base_model: Option<ArtifactRef>,
    pub config: TrainingConfig,
    pub submitter: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum JobState {
    Submitted,
    Running,
    Completed,
    Failed,
}

impl JobState {
    /// SUBMITTED→RUNNING→{COMPLETED, FAILED}. Self-loops are not transitions.
    pub fn can_transition_to(self, next: JobState) -> bool {
        matches!(
            (self, next),
            (JobState::Submitted, JobState::Running)
                | (JobState::Running, JobState::Completed)
                | (JobState::Running, JobState::Failed)
        )
    }

    pub fn is_terminal(self) -> bool {
        matches!(self, JobState::Completed | JobState::Failed)
    }
}

impl fmt::Display for JobState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            JobState::Submitted => "SUBMITTED",
            JobState::Running => "RUNNING",
            JobState::Completed => "COMPLETED",
            JobState::Failed => "FAILED",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobRecord {
    pub job_id: String,
    pub spec: JobSpec,
    pub state: JobState,
    pub created_at: DateTime<Utc>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub started_at: Option<DateTime<Utc>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub finished_at: Option<DateTime<Utc>>,
    #[serde(default)]
    pub outputs: Vec<ArtifactRef>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failure_reason: Option<String>,
    #[serde(default)]
    pub attempts: u32,
}

/// Fixed output object names of a completed job.
pub mod outputs {
    pub const MODEL: &str = "model.bin";
    pub const METRICS: &str = "metrics.json";
    pub const DATASET: &str = "dataset.csv";
    pub const BASE_MODEL: &str = "base_model.bin";
    pub const TRAINING_LOG: &str = "training.log";

    pub fn link_name(job_id: &str) -> String {
        format!("{job_id}.link.json")
    }

    pub fn aibom_name(job_id: &str) -> String {
        format!("{job_id}.aibom.json")
    }
}

impl JobRecord {
    pub fn output(&self, name: &str) -> Option<&ArtifactRef> {
        self.outputs.iter().find(|o| o.name == name)
    }

    pub fn has_attestations(&self) -> bool {
        self.output(&outputs::link_name(&self.job_id)).is_some()
            && self.output(&outputs::aibom_name(&self.job_id)).is_some()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvironmentSnapshot {
    pub worker_image_digest: Digest,
    pub platform_version: String,
    pub hostname: String,
    pub cpu_model: String,
    pub total_memory_bytes: u64,
    pub wall_clock_start: DateTime<Utc>,
    pub wall_clock_end: DateTime<Utc>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scanner_report_ref: Option<ArtifactRef>,
}

/// Measurements of one training run. Kept as floats in memory; rendered to
/// fixed-point strings whenever they enter a stored or signed document.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainingMetrics {
    pub final_loss: f64,
    pub loss_per_epoch: Vec<f64>,
    pub duration_seconds: f64,
    pub aibom_generation_seconds: f64,
}

impl TrainingMetrics {
    /// The `metrics.json` document. `aibom_generation_seconds` is not part of
    /// it: the file is hashed into the attestation whose cost is being timed.
    pub fn to_document(&self, config: &TrainingConfig) -> Result<Value, CanonicalError> {
        let losses = self
            .loss_per_epoch
            .iter()
            .map(|l| decimal_string(*l))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(json!({
            "task": config.task.to_string(),
            "epochs": config.epochs,
            "final_loss": decimal_string(self.final_loss)?,
            "loss_per_epoch": losses,
            "duration_seconds": decimal_string(self.duration_seconds)?,
        }))
    }
}
