//! Verification with nothing but the platform public key. Runs the same core
//! checks the gateway runs and never opens a network connection.

use aibomgen_core::aibom::verify_aibom;
use aibomgen_core::attestation::{verify_artifact_against_link, verify_envelope, PublicKey, SignedEnvelope};
use aibomgen_core::model::normalize_name;
use aibomgen_core::report::{MatchResult, VerificationReport};

pub fn link(envelope: &[u8], key: &PublicKey) -> anyhow::Result<VerificationReport> {
    let env = SignedEnvelope::from_bytes(envelope)?;
    Ok(verify_envelope(&env, key))
}

pub enum HashOutcome {
    Checked(MatchResult),
    /// The link itself failed verification, so it cannot vouch for any digest.
    LinkUnverified(VerificationReport),
}

pub fn hash(envelope: &[u8], artifact: &[u8], name: &str, key: &PublicKey) -> anyhow::Result<HashOutcome> {
    let env = SignedEnvelope::from_bytes(envelope)?;
    let report = verify_envelope(&env, key);
    if !report.passed {
        return Ok(HashOutcome::LinkUnverified(report));
    }
    let link = env.link()?;
    Ok(HashOutcome::Checked(verify_artifact_against_link(&link, &normalize_name(name)?, artifact)))
}

/// Without storage access the artifact comparison is skipped.
pub fn aibom(aibom: &[u8], envelope: &[u8], key: &PublicKey) -> VerificationReport {
    verify_aibom(aibom, key, envelope, None)
}
