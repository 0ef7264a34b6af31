//! Attack scenarios and randomized state-machine checks against a running
//! platform instance.

pub mod fixtures;
pub mod interleave;
pub mod scenarios;

pub use scenarios::{render_matrix, DetectionResult, Harness, HarnessSetupFailed, Scenario, Trial};
