use serde::{Deserialize, Serialize};

use super::schema::{scan_body, HEADER_END};
use super::{verify_proof, ProvenanceError, RedactedProof, ResponseSchema, Stream};
use crate::crypto::SigningPublicKey;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FailureReason {
    BadSignature,
    BadPath,
    QueryMismatch,
    ResponseMismatch,
    StructureViolation,
    StaleTimestamp,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuditVerdict {
    pub passed: bool,
    pub reason: Option<FailureReason>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub detail: Option<String>,
}

impl AuditVerdict {
    pub fn pass() -> Self {
        Self {
            passed: true,
            reason: None,
            detail: None,
        }
    }

    pub fn fail(reason: FailureReason, detail: impl Into<String>) -> Self {
        Self {
            passed: false,
            reason: Some(reason),
            detail: Some(detail.into()),
        }
    }
}

fn first_revealed_header_end(masked: &[Option<u8>]) -> Option<usize> {
    masked.windows(HEADER_END.len()).position(|w| {
        w.iter().zip(HEADER_END).all(|(b, want)| *b == Some(*want))
    })
}

/// Checks a proxy's proof for one audited exchange. Never panics on hostile
/// input; every failure maps to a reason.
#[allow(clippy::too_many_arguments)]
pub fn check_audit_response(
    proof: &RedactedProof,
    notary: &SigningPublicKey,
    expected_query: &str,
    expected_response: &str,
    schema: &ResponseSchema,
    max_age_secs: u64,
    now_secs: u64,
) -> AuditVerdict {
    use FailureReason::*;

    let view = match verify_proof(proof, notary) {
        Ok(v) => v,
        Err(ProvenanceError::BadSignature) => return AuditVerdict::fail(BadSignature, "notary signature"),
        Err(ProvenanceError::BadPath) => return AuditVerdict::fail(BadPath, "merkle path"),
        Err(e) => return AuditVerdict::fail(StructureViolation, e.to_string()),
    };
    let c = &proof.commitment;
    if c.server_name != schema.server_name {
        return AuditVerdict::fail(
            StructureViolation,
            format!("server {} is not {}", c.server_name, schema.server_name),
        );
    }
    if now_secs.abs_diff(c.timestamp) > max_age_secs {
        return AuditVerdict::fail(
            StaleTimestamp,
            format!("session at {} is more than {max_age_secs}s from {now_secs}", c.timestamp),
        );
    }

    // the query must be visible, verbatim, inside the request body
    let request = view.masked(Stream::Request);
    let needle = serde_json::to_string(expected_query).expect("string serializes");
    let found = first_revealed_header_end(&request).is_some_and(|sep| {
        let body = &request[sep + HEADER_END.len()..];
        body.split(|b| b.is_none()).any(|run| {
            let run: Vec<u8> = run.iter().map(|b| b.unwrap()).collect();
            run.windows(needle.len().max(1)).any(|w| w == needle.as_bytes())
        })
    });
    if !found {
        return AuditVerdict::fail(QueryMismatch, "expected query not revealed in request body");
    }

    let response = view.masked(Stream::Response);
    let Some(sep) = first_revealed_header_end(&response) else {
        return AuditVerdict::fail(StructureViolation, "response head terminator hidden");
    };
    if !schema.redactable_head && response[..sep].iter().any(Option::is_none) {
        return AuditVerdict::fail(StructureViolation, "response head redacted");
    }
    let body = &response[sep + HEADER_END.len()..];
    let leaves = match scan_body(body, Some(schema)).and_then(|l| schema.check_leaves(&l).map(|_| l)) {
        Ok(l) => l,
        Err(e) => return AuditVerdict::fail(StructureViolation, e.to_string()),
    };
    let Some(content) = leaves.iter().find(|l| l.path == schema.content_path) else {
        return AuditVerdict::fail(StructureViolation, "content field missing");
    };
    if content.hidden || !content.is_string {
        return AuditVerdict::fail(StructureViolation, "content field hidden");
    }
    let raw: Vec<u8> = body[content.span.clone()].iter().map(|b| b.unwrap()).collect();
    match serde_json::from_slice::<String>(&raw) {
        Ok(text) if text == expected_response => AuditVerdict::pass(),
        Ok(_) => AuditVerdict::fail(ResponseMismatch, "revealed content differs from delivered response"),
        Err(e) => AuditVerdict::fail(StructureViolation, e.to_string()),
    }
}
