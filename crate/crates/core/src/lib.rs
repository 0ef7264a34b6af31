//! Verifiable training platform core: content-addressed storage, the job
//! orchestrator, the enforced worker pipeline, and the attestation and AIBOM
//! formats that make each job's inputs and outputs checkable by third parties.

pub mod aibom;
pub mod attestation;
pub mod canonical;
pub mod clock;
pub mod digest;
pub mod model;
pub mod orchestrator;
pub mod report;
pub mod scanner;
pub mod storage;
pub mod trainer;
pub mod worker;

pub use digest::{compute_digest, Digest};
pub use model::{ArtifactRef, JobRecord, JobSpec, JobState, Task, TrainingConfig};
pub use report::{MatchResult, MatchStatus, VerificationReport};
