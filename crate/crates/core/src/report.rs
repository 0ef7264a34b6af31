//! Result shapes shared by every verification path.

use serde::{Deserialize, Serialize};

use crate::digest::Digest;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub detail: Option<String>,
}

/// Outcome of a verification. Failures are entries, never errors.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct VerificationReport {
    pub passed: bool,
    pub checks: Vec<CheckResult>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub artifacts: Vec<MatchResult>,
}

impl VerificationReport {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn pass(&mut self, name: &str) {
        self.push(name, true, None);
    }

    pub fn fail(&mut self, name: &str, detail: impl Into<String>) {
        self.push(name, false, Some(detail.into()));
    }

    pub fn record(&mut self, name: &str, passed: bool, detail: Option<String>) {
        self.push(name, passed, detail);
    }

    fn push(&mut self, name: &str, passed: bool, detail: Option<String>) {
        self.checks.push(CheckResult {
            name: name.to_owned(),
            passed,
            detail,
        });
        self.recompute();
    }

    /// Folds a nested report in, prefixing its check names.
    pub fn absorb(&mut self, prefix: &str, other: VerificationReport) {
        for c in other.checks {
            self.checks.push(CheckResult {
                name: format!("{prefix}.{}", c.name),
                ..c
            });
        }
        self.artifacts.extend(other.artifacts);
        self.recompute();
    }

    pub fn check(&self, name: &str) -> Option<&CheckResult> {
        self.checks.iter().find(|c| c.name == name)
    }

    /// `Some(passed)` for a named check.
    pub fn outcome(&self, name: &str) -> Option<bool> {
        self.check(name).map(|c| c.passed)
    }

    pub fn failed_checks(&self) -> impl Iterator<Item = &CheckResult> {
        self.checks.iter().filter(|c| !c.passed)
    }

    fn recompute(&mut self) {
        self.passed = !self.checks.is_empty()
            && self.checks.iter().all(|c| c.passed)
            && self.artifacts.iter().all(MatchResult::is_match);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum MatchStatus {
    Match,
    Mismatch,
    UnknownName,
    /// Named in the attestation but absent from storage.
    Missing,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MatchResult {
    pub name: String,
    pub status: MatchStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub expected: Option<Digest>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub actual: Option<Digest>,
}

impl MatchResult {
    pub fn compare(name: &str, expected: &Digest, actual: Digest) -> Self {
        let status = if *expected == actual {
            MatchStatus::Match
        } else {
            MatchStatus::Mismatch
        };
        Self {
            name: name.to_owned(),
            status,
            expected: Some(expected.clone()),
            actual: Some(actual),
        }
    }

    pub fn unknown(name: &str) -> Self {
        Self {
            name: name.to_owned(),
            status: MatchStatus::UnknownName,
            expected: None,
            actual: None,
        }
    }

    pub fn missing(name: &str, expected: &Digest) -> Self {
        Self {
            name: name.to_owned(),
            status: MatchStatus::Missing,
            expected: Some(expected.clone()),
            actual: None,
        }
    }

    pub fn is_match(&self) -> bool {
        self.status == MatchStatus::Match
    }
}

/// Per-artifact comparison of a link against storage.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct StorageReport {
    pub passed: bool,
    pub envelope: VerificationReport,
    pub results: Vec<MatchResult>,
}

impl StorageReport {
    pub fn new(envelope: VerificationReport, results: Vec<MatchResult>) -> Self {
        let passed = envelope.passed && results.iter().all(MatchResult::is_match);
        Self {
            passed,
            envelope,
            results,
        }
    }

    pub fn mismatched(&self) -> impl Iterator<Item = &MatchResult> {
        self.results.iter().filter(|r| !r.is_match())
    }
}
