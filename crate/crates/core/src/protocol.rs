//! Messages exchanged between users, the coordinator and proxies, and the
//! byte strings that get signed.
//!
//! JSON carries binary values as standard base64, except query ids, which
//! double as URL path segments and therefore use the URL-safe alphabet
//! without padding.

use std::fmt;
use std::str::FromStr;

use base64::engine::general_purpose::URL_SAFE_NO_PAD;
use base64::Engine;
use rand::RngCore;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::crypto::{
    derive_shared_key, open, seal, AgreementPublicKey, AgreementSecret, CryptoError, ECashToken,
    SealedBox, SecureRng, Signature, SigningPublicKey,
};
use crate::provenance::{AuditVerdict, RedactedProof};
use crate::wire::concat_fields;

/// 128-bit random capability naming one query slot.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct QueryId(pub [u8; 16]);

impl QueryId {
    pub fn random(rng: &mut impl RngCore) -> Self {
        let mut id = [0u8; 16];
        rng.fill_bytes(&mut id);
        Self(id)
    }
}

impl fmt::Display for QueryId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&URL_SAFE_NO_PAD.encode(self.0))
    }
}

impl fmt::Debug for QueryId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "QueryId({self})")
    }
}

impl FromStr for QueryId {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bytes = URL_SAFE_NO_PAD.decode(s).map_err(|e| e.to_string())?;
        let arr: [u8; 16] = bytes.try_into().map_err(|_| "query id must be 16 bytes".to_string())?;
        Ok(Self(arr))
    }
}

impl Serialize for QueryId {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for QueryId {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        String::deserialize(d)?.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum Direction {
    Query = 1,
    Response = 2,
}

/// Associated data binding a sealed payload to its slot and direction.
pub fn envelope_aad(id: &QueryId, direction: Direction) -> Vec<u8> {
    let mut aad = id.0.to_vec();
    aad.push(direction as u8);
    aad
}

pub fn auth_message(pseudonym: &str, nonce: &[u8]) -> Vec<u8> {
    concat_fields(&[b"veil/auth/v1", pseudonym.as_bytes(), nonce])
}

pub fn downvote_message(id: &QueryId) -> Vec<u8> {
    concat_fields(&[b"veil/downvote/v1", &id.0])
}

/// Follow-ups are authorized by a signature over the raw id of the latest
/// query in the thread.
pub fn ownership_message(latest: &QueryId) -> Vec<u8> {
    latest.0.to_vec()
}

/// What the coordinator stores and relays. Audit envelopes are built with
/// exactly the same fields.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryEnvelope {
    pub query_id: QueryId,
    pub proxy_pseudonym: String,
    pub client_agreement_pub: AgreementPublicKey,
    pub client_signing_pub: SigningPublicKey,
    pub payload: SealedBox,
    pub payment: ECashToken,
    /// Set by the coordinator on acceptance.
    #[serde(default)]
    pub created_at: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThreadContinuation {
    pub thread_id: String,
    pub ownership_sig: Signature,
}

/// The sealed query plaintext; the coordinator never sees it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryPayload {
    pub query: String,
    pub backend: String,
    pub thread: Option<ThreadContinuation>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResponseStatus {
    Ok,
    Error,
}

/// The sealed response plaintext.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResponsePayload {
    pub status: ResponseStatus,
    pub text: String,
    pub thread_id: Option<String>,
    pub error: Option<String>,
}

impl ResponsePayload {
    pub fn ok(text: String, thread_id: String) -> Self {
        Self {
            status: ResponseStatus::Ok,
            text,
            thread_id: Some(thread_id),
            error: None,
        }
    }

    pub fn failure(error: impl Into<String>) -> Self {
        Self {
            status: ResponseStatus::Error,
            text: String::new(),
            thread_id: None,
            error: Some(error.into()),
        }
    }
}

pub fn seal_json<T: Serialize>(
    value: &T,
    mine: &AgreementSecret,
    theirs: &AgreementPublicKey,
    id: &QueryId,
    direction: Direction,
    rng: &mut impl SecureRng,
) -> SealedBox {
    let key = derive_shared_key(mine, theirs);
    let bytes = serde_json::to_vec(value).expect("payload serializes");
    seal(&key, &bytes, &envelope_aad(id, direction), rng)
}

#[derive(Debug, thiserror::Error)]
pub enum OpenError {
    #[error(transparent)]
    Crypto(#[from] CryptoError),
    #[error("payload is not valid json: {0}")]
    Json(#[from] serde_json::Error),
}

pub fn open_json<T: for<'de> Deserialize<'de>>(
    sealed: &SealedBox,
    mine: &AgreementSecret,
    theirs: &AgreementPublicKey,
    id: &QueryId,
    direction: Direction,
) -> Result<T, OpenError> {
    let key = derive_shared_key(mine, theirs);
    let bytes = open(&key, sealed, &envelope_aad(id, direction))?;
    Ok(serde_json::from_slice(&bytes)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegisterRequest {
    pub pseudonym: String,
    pub agreement_pub: AgreementPublicKey,
    pub signing_pub: SigningPublicKey,
    pub supported_backends: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Challenge {
    pub text: String,
    pub nonce: String,
    pub backend: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChallengeSet {
    pub challenges: Vec<Challenge>,
    pub deadline: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChallengeAnswer {
    pub response: String,
    pub proof: RedactedProof,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompleteRequest {
    pub pseudonym: String,
    pub answers: Vec<ChallengeAnswer>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegistrationOutcome {
    pub active: bool,
    pub verdicts: Vec<AuditVerdict>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NonceRequest {
    pub pseudonym: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NonceResponse {
    #[serde(with = "crate::wire::b64")]
    pub nonce: Vec<u8>,
    pub expires_at: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuthRequest {
    pub pseudonym: String,
    #[serde(with = "crate::wire::b64")]
    pub nonce: Vec<u8>,
    pub signature: Signature,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenResponse {
    pub token: String,
    pub expires_at: u64,
}

/// Reputation figures shown to users. Rates are absent when their
/// denominator is zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProxyStats {
    pub sla_rate: Option<f64>,
    pub mttr_seconds: Option<f64>,
    pub load_day: u32,
    pub load_hour: u32,
    pub downvote_rate: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProxyListing {
    pub pseudonym: String,
    pub agreement_pub: AgreementPublicKey,
    pub supported_backends: Vec<String>,
    pub stats: ProxyStats,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubmitResponse {
    pub query_id: QueryId,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PollResponse {
    pub queries: Vec<QueryEnvelope>,
    /// Earlier answers the coordinator now wants proven.
    pub proof_requests: Vec<QueryId>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RespondRequest {
    pub query_id: QueryId,
    pub payload: SealedBox,
    #[serde(default, with = "opt_b64", skip_serializing_if = "Option::is_none")]
    pub blinded_ecash_request: Option<Vec<u8>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditProofRequest {
    pub query_id: QueryId,
    pub proof: RedactedProof,
    #[serde(default, with = "opt_b64", skip_serializing_if = "Option::is_none")]
    pub blinded_ecash_request: Option<Vec<u8>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditProofResponse {
    pub verdict: AuditVerdict,
    #[serde(default, with = "opt_b64", skip_serializing_if = "Option::is_none")]
    pub blinded_signature: Option<Vec<u8>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FetchStatus {
    Pending,
    Ready,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FetchResponse {
    pub status: FetchStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub payload: Option<SealedBox>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reason: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DownvoteRequest {
    pub signature: Signature,
}

pub(crate) mod opt_b64 {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &Option<Vec<u8>>, s: S) -> Result<S::Ok, S::Error> {
        match v {
            Some(bytes) => s.serialize_some(&crate::wire::b64_encode(bytes)),
            None => s.serialize_none(),
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<Vec<u8>>, D::Error> {
        Option::<String>::deserialize(d)?
            .map(|t| crate::wire::b64_decode(&t).map_err(serde::de::Error::custom))
            .transpose()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    #[test]
    fn query_id_text_round_trip() {
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        let id = QueryId::random(&mut rng);
        let text = id.to_string();
        assert!(!text.contains('/') && !text.contains('+') && !text.contains('='));
        assert_eq!(text.parse::<QueryId>().unwrap(), id);
        let json = serde_json::to_string(&id).unwrap();
        assert_eq!(serde_json::from_str::<QueryId>(&json).unwrap(), id);
    }

    #[test]
    fn sealed_payload_is_slot_bound() {
        let mut rng = ChaCha20Rng::seed_from_u64(2);
        let client = AgreementSecret::generate(&mut rng);
        let proxy = AgreementSecret::generate(&mut rng);
        let id = QueryId::random(&mut rng);
        let other = QueryId::random(&mut rng);
        let p = ResponsePayload::ok("hi".into(), "t".into());
        let sealed = seal_json(&p, &proxy, &client.public_key(), &id, Direction::Response, &mut rng);
        let back: ResponsePayload = open_json(&sealed, &client, &proxy.public_key(), &id, Direction::Response).unwrap();
        assert_eq!(back, p);
        assert!(open_json::<ResponsePayload>(&sealed, &client, &proxy.public_key(), &other, Direction::Response).is_err());
        assert!(open_json::<ResponsePayload>(&sealed, &client, &proxy.public_key(), &id, Direction::Query).is_err());
    }
}
