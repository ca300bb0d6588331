//! Notarized, selectively redactable session transcripts.
//!
//! A notary commits to a request/response transcript by signing salted
//! Merkle roots over 16-byte chunks. The prover later opens any subset of
//! chunks; the verifier learns exactly those bytes and their offsets, plus
//! the positions of everything hidden. [`check_audit_response`] layers the
//! audit-specific checks (query present, content intact, redactions only in
//! declared fields, freshness) on top.

mod audit;
pub mod merkle;
mod proof;
mod schema;

pub use audit::{check_audit_response, AuditVerdict, FailureReason};
pub use proof::{
    build_proof, notarize, verify_proof, LocalNotary, Notarization, Notary, RedactedProof,
    RevealRanges, RevealedChunk, RevealedView, SessionCommitment, TranscriptSalts,
};
pub use schema::{plan_reveal, scan_body, FieldRule, Leaf, ResponseSchema, ScanError};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::wire::WireError;

pub const CHUNK_SIZE: usize = 16;
pub const SALT_LEN: usize = 16;
pub const DEFAULT_MAX_TRANSCRIPT: usize = 1 << 20;
/// Audit answers older than this are rejected.
pub const DEFAULT_MAX_AGE_SECS: u64 = 600;

/// A captured HTTP exchange between a proxy and a chatbot backend.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SessionTranscript {
    #[serde(with = "crate::wire::b64")]
    pub request: Vec<u8>,
    #[serde(with = "crate::wire::b64")]
    pub response: Vec<u8>,
    pub server_name: String,
    /// Seconds since the Unix epoch.
    pub timestamp: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stream {
    Request,
    Response,
}

impl Stream {
    fn tag(self) -> u8 {
        match self {
            Stream::Request => 0,
            Stream::Response => 1,
        }
    }

    fn from_tag(tag: u8) -> Result<Self, WireError> {
        match tag {
            0 => Ok(Stream::Request),
            1 => Ok(Stream::Response),
            _ => Err(WireError::BadValue("stream")),
        }
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ProvenanceError {
    #[error("transcript of {0} bytes exceeds the {1}-byte limit")]
    TooLarge(usize, usize),
    #[error("transcript has an empty {0:?} stream")]
    EmptyStream(Stream),
    #[error("reveal range {start}..{end} outside {stream:?} stream of {len} bytes")]
    RangeOutOfBounds {
        stream: Stream,
        start: usize,
        end: usize,
        len: usize,
    },
    #[error("salts or commitment do not match the transcript")]
    CommitmentMismatch,
    #[error("notary signature invalid")]
    BadSignature,
    #[error("merkle path invalid")]
    BadPath,
    #[error("malformed proof: {0}")]
    Malformed(String),
    #[error("notary unavailable: {0}")]
    Unavailable(String),
    #[error(transparent)]
    Wire(#[from] WireError),
}
