//! Signed in-toto link attestations binding a job's inputs to its outputs.

mod envelope;
mod keys;
mod link;

pub use envelope::{
    pae, sign_envelope, verify_envelope, EnvelopeError, EnvelopeSignature, SignedEnvelope, AIBOM_PAYLOAD_TYPE,
    LINK_PAYLOAD_TYPE,
};
pub use keys::{KeyError, KeyPair, PublicKey};
pub use link::{
    check_layout, create_link, pipeline_command, verify_artifact_against_link, Byproducts, LinkError, LinkFile,
    PIPELINE_PROGRAM, STEP_NAME,
};
