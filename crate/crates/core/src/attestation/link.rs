//! in-toto link metadata for the single attested `train` step.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::canonical::decimal_string;
use crate::digest::{compute_digest, Digest};
use crate::model::{normalize_name, ArtifactRef, EnvironmentSnapshot, JobRecord, JobState, TrainingConfig};
use crate::report::MatchResult;

pub const STEP_NAME: &str = "train";
/// Program name at the head of every attested command line.
pub const PIPELINE_PROGRAM: &str = "aibomgen-worker";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Byproducts {
    pub return_code: i32,
    pub duration_seconds: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinkFile {
    #[serde(rename = "_type")]
    pub link_type: String,
    #[serde(rename = "name")]
    pub step_name: String,
    pub job_id: String,
    pub command: Vec<String>,
    pub materials: BTreeMap<String, Digest>,
    pub products: BTreeMap<String, Digest>,
    pub byproducts: Byproducts,
    pub environment: EnvironmentSnapshot,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum LinkError {
    #[error("job {0} is not RUNNING")]
    NotRunning(String),
    #[error("a link needs at least one product")]
    MissingProduct,
    #[error("artifact {0:?} listed more than once")]
    Duplicate(String),
    #[error("artifact {0:?} is both a material and a product")]
    Overlap(String),
    #[error("invalid artifact name: {0}")]
    InvalidName(String),
}

/// The fixed command line the worker runs for a given configuration.
pub fn pipeline_command(config: &TrainingConfig) -> Vec<String> {
    vec![
        PIPELINE_PROGRAM.to_owned(),
        STEP_NAME.to_owned(),
        format!("--task={}", config.task),
        format!("--epochs={}", config.epochs),
        format!("--batch-size={}", config.batch_size),
        format!("--learning-rate={}", config.learning_rate),
        format!("--seed={}", config.seed),
        format!("--framework={}", config.framework_tag),
    ]
}

fn collect(refs: &[ArtifactRef]) -> Result<BTreeMap<String, Digest>, LinkError> {
    let mut map = BTreeMap::new();
    for r in refs {
        let name = normalize_name(&r.name).map_err(|e| LinkError::InvalidName(e.to_string()))?;
        if map.insert(name.clone(), r.digest.clone()).is_some() {
            return Err(LinkError::Duplicate(name));
        }
    }
    Ok(map)
}

/// Builds the link for a running job. Material and product maps mirror the
/// given refs one-to-one.
pub fn create_link(
    job: &JobRecord,
    env: &EnvironmentSnapshot,
    materials: &[ArtifactRef],
    products: &[ArtifactRef],
) -> Result<LinkFile, LinkError> {
    if job.state != JobState::Running {
        return Err(LinkError::NotRunning(job.job_id.clone()));
    }
    if products.is_empty() {
        return Err(LinkError::MissingProduct);
    }
    let materials = collect(materials)?;
    let products = collect(products)?;
    if let Some(name) = materials.keys().find(|k| products.contains_key(*k)) {
        return Err(LinkError::Overlap(name.clone()));
    }
    let elapsed = (env.wall_clock_end - env.wall_clock_start)
        .to_std()
        .map(|d| d.as_secs_f64())
        .unwrap_or(0.0);
    Ok(LinkFile {
        link_type: "link".to_owned(),
        step_name: STEP_NAME.to_owned(),
        job_id: job.job_id.clone(),
        command: pipeline_command(&job.spec.config),
        materials,
        products,
        byproducts: Byproducts {
            return_code: 0,
            duration_seconds: decimal_string(elapsed).expect("durations are finite"),
        },
        environment: env.clone(),
    })
}

impl LinkFile {
    pub fn recorded(&self, name: &str) -> Option<&Digest> {
        self.materials.get(name).or_else(|| self.products.get(name))
    }

    /// Every (name, digest) pair, materials first.
    pub fn artifacts(&self) -> impl Iterator<Item = (&String, &Digest)> {
        self.materials.iter().chain(self.products.iter())
    }
}

/// Layout rules for the single-step pipeline. Returns human-readable problems.
pub fn check_layout(link: &LinkFile) -> Vec<String> {
    let mut problems = Vec::new();
    if link.link_type != "link" {
        problems.push(format!("_type is {:?}, expected \"link\"", link.link_type));
    }
    if link.step_name != STEP_NAME {
        problems.push(format!("step {:?} is not part of the layout", link.step_name));
    }
    if link.command.len() < 2 || link.command[0] != PIPELINE_PROGRAM || link.command[1] != STEP_NAME {
        problems.push("command is not the enforced pipeline invocation".to_owned());
    }
    if link.products.is_empty() {
        problems.push("no products".to_owned());
    }
    for name in link.materials.keys().chain(link.products.keys()) {
        if normalize_name(name).as_deref() != Ok(name.as_str()) {
            problems.push(format!("artifact name {name:?} is not normalized"));
        }
    }
    if let Some(name) = link.materials.keys().find(|k| link.products.contains_key(*k)) {
        problems.push(format!("{name:?} is both a material and a product"));
    }
    if link.byproducts.return_code != 0 {
        problems.push(format!("return code {}", link.byproducts.return_code));
    }
    if link.environment.wall_clock_end < link.environment.wall_clock_start {
        problems.push("environment clock ends before it starts".to_owned());
    }
    problems
}

/// Hashes `bytes` and compares against the digest recorded for `name`.
pub fn verify_artifact_against_link(link: &LinkFile, name: &str, bytes: &[u8]) -> MatchResult {
    let Some(expected) = normalize_name(name).ok().and_then(|n| link.recorded(&n).cloned()) else {
        return MatchResult::unknown(name);
    };
    MatchResult::compare(name, &expected, compute_digest(bytes))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{JobSpec, Task};
    use crate::report::MatchStatus;
    use chrono::{Duration, Utc};

    fn job() -> JobRecord {
        let dataset = ArtifactRef::new("dataset.csv", compute_digest(b"x,y\n1,2\n"), 8, "text/csv");
        JobRecord {
            job_id: "job-1".into(),
            spec: JobSpec {
                dataset,
                base_model: None,
                config: TrainingConfig::new(Task::Regression, 3, 8, 0.1),
                submitter: "alice".into(),
            },
            state: JobState::Running,
            created_at: Utc::now(),
            started_at: Some(Utc::now()),
            finished_at: None,
            outputs: vec![],
            failure_reason: None,
            attempts: 1,
        }
    }

    fn env() -> EnvironmentSnapshot {
        let start = Utc::now();
        EnvironmentSnapshot {
            worker_image_digest: compute_digest(b"worker"),
            platform_version: "test".into(),
            hostname: "h".into(),
            cpu_model: "c".into(),
            total_memory_bytes: 1,
            wall_clock_start: start,
            wall_clock_end: start + Duration::milliseconds(1500),
            scanner_report_ref: None,
        }
    }

    fn aref(name: &str, bytes: &[u8]) -> ArtifactRef {
        ArtifactRef::new(name, compute_digest(bytes), bytes.len() as u64, "application/octet-stream")
    }

    #[test]
    fn structural_echo() {
        let link = create_link(
            &job(),
            &env(),
            &[aref("dataset.csv", b"d")],
            &[aref("model.bin", b"m"), aref("metrics.json", b"{}")],
        )
        .unwrap();
        assert_eq!(link.step_name, "train");
        assert_eq!(link.materials.len(), 1);
        assert_eq!(link.products.len(), 2);
        assert_eq!(link.byproducts.duration_seconds, "1.5");
        assert_eq!(link.command[0], PIPELINE_PROGRAM);
        assert!(check_layout(&link).is_empty());
    }

    #[test]
    fn empty_products_rejected() {
        let err = create_link(&job(), &env(), &[aref("dataset.csv", b"d")], &[]).unwrap_err();
        assert_eq!(err, LinkError::MissingProduct);
    }

    #[test]
    fn requires_running_job() {
        let mut j = job();
        j.state = JobState::Submitted;
        assert!(matches!(
            create_link(&j, &env(), &[], &[aref("m", b"m")]),
            Err(LinkError::NotRunning(_))
        ));
    }

    #[test]
    fn duplicates_and_overlap_rejected() {
        let dup = create_link(&job(), &env(), &[], &[aref("m.bin", b"1"), aref("./m.bin", b"2")]);
        assert_eq!(dup.unwrap_err(), LinkError::Duplicate("m.bin".into()));
        let overlap = create_link(&job(), &env(), &[aref("a", b"1")], &[aref("a", b"1")]);
        assert_eq!(overlap.unwrap_err(), LinkError::Overlap("a".into()));
        let bad = create_link(&job(), &env(), &[aref("../a", b"1")], &[aref("b", b"1")]);
        assert!(matches!(bad, Err(LinkError::InvalidName(_))));
    }

    #[test]
    fn artifact_matching() {
        let data = b"x,y\n1,2\n".to_vec();
        let link = create_link(&job(), &env(), &[aref("dataset.csv", &data)], &[aref("model.bin", b"m")]).unwrap();

        assert_eq!(verify_artifact_against_link(&link, "dataset.csv", &data).status, MatchStatus::Match);

        let mut flipped = data.clone();
        flipped[0] ^= 0xff;
        let r = verify_artifact_against_link(&link, "dataset.csv", &flipped);
        assert_eq!(r.status, MatchStatus::Mismatch);
        assert_eq!(r.expected, Some(compute_digest(&data)));
        assert_eq!(r.actual, Some(compute_digest(&flipped)));

        assert_eq!(
            verify_artifact_against_link(&link, "nonexistent.bin", &data).status,
            MatchStatus::UnknownName
        );
    }

    #[test]
    fn layout_rejects_foreign_steps() {
        let mut link = create_link(&job(), &env(), &[], &[aref("m", b"m")]).unwrap();
        link.step_name = "deploy".into();
        link.command = vec!["sh".into(), "-c".into()];
        assert_eq!(check_layout(&link).len(), 2);
    }
}
