//! The directory-and-relay service.
//!
//! All state lives in one mutex-guarded [`State`]; every operation that
//! changes it runs start to finish under the lock and, when a store path is
//! configured, persists a snapshot before releasing it. That makes token
//! redemption and audit transitions linearizable.

pub mod bearer;
mod questions;
mod stats;

pub use questions::QuestionBank;
pub use stats::{compute_proxy_stats, EventKind, ProxyEvent};

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, MutexGuard};

use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use self::bearer::BearerClaims;
use crate::chatbot::MOCK_BACKEND_ID;
use crate::clock::Clock;
use crate::crypto::{
    ecash_sign_blinded, ecash_verify, generate_identity, verify_signature, AgreementPublicKey,
    AgreementSecret, ECashToken, IssuerKey, IssuerPublicKey, SigningPublicKey, SigningSecret,
};
use crate::protocol::{
    auth_message, downvote_message, open_json, seal_json, AuditProofRequest, AuditProofResponse,
    AuthRequest, Challenge, ChallengeSet, CompleteRequest, Direction, DownvoteRequest, FetchResponse,
    FetchStatus, NonceResponse, PollResponse, ProxyListing, ProxyStats, QueryEnvelope, QueryId,
    QueryPayload, RegisterRequest, RegistrationOutcome, RespondRequest, ResponsePayload,
    ResponseStatus, TokenResponse,
};
use crate::provenance::{check_audit_response, AuditVerdict, FailureReason, ResponseSchema};
use crate::wire::b64_encode;

const SEC: u64 = 1000;
const DAY: u64 = 86_400 * SEC;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CoordinatorConfig {
    pub p_a: f64,
    pub sla_threshold_secs: u64,
    pub active_window_secs: u64,
    pub retention_days: u64,
    pub token_expiry_secs: u64,
    pub nonce_ttl_secs: u64,
    pub registration_deadline_secs: u64,
    pub challenges_per_registration: usize,
    pub redelivery_secs: u64,
    pub proof_max_age_secs: u64,
    /// A proxy that has received an audit must have proven it within this
    /// long, or it is treated as having failed.
    pub audit_timeout_secs: u64,
    pub bootstrap_tokens: u32,
    pub seed: Option<u64>,
}

impl Default for CoordinatorConfig {
    fn default() -> Self {
        Self {
            p_a: 0.125,
            sla_threshold_secs: 60,
            active_window_secs: 300,
            retention_days: 30,
            token_expiry_secs: 86_400,
            nonce_ttl_secs: 120,
            registration_deadline_secs: 600,
            challenges_per_registration: 1,
            redelivery_secs: 60,
            proof_max_age_secs: 600,
            audit_timeout_secs: 3_600,
            bootstrap_tokens: 0,
            seed: None,
        }
    }
}

impl CoordinatorConfig {
    pub fn validate(&self) -> std::result::Result<(), String> {
        if !(0.0..=1.0).contains(&self.p_a) {
            return Err(format!("p_a = {} outside [0, 1]", self.p_a));
        }
        if !(1..=3).contains(&self.challenges_per_registration) {
            return Err("challenges_per_registration must be 1, 2 or 3".into());
        }
        Ok(())
    }
}

/// Long-lived secrets plus the notary key the coordinator trusts.
#[derive(Clone)]
pub struct CoordinatorKeys {
    pub issuer: IssuerKey,
    pub bearer: SigningSecret,
    pub notary: SigningPublicKey,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum CoordinatorError {
    #[error("pseudonym already registered")]
    DuplicatePseudonym,
    #[error("pseudonym is banned; register under a different one")]
    BannedPseudonym,
    #[error("unknown proxy")]
    UnknownProxy,
    #[error("proxy is not accepting queries")]
    ProxyUnavailable,
    #[error("registration is not pending")]
    NotPending,
    #[error("registration deadline passed")]
    DeadlineExceeded,
    #[error("proxy is not active")]
    NotActive,
    #[error("nonce unknown, expired or already used")]
    NonceInvalid,
    #[error("signature does not verify")]
    BadSignature,
    #[error("bearer token expired")]
    AuthExpired,
    #[error("bearer token rejected")]
    AuthRejected,
    #[error("payment token does not verify")]
    InvalidToken,
    #[error("payment token already spent")]
    DoubleSpend,
    #[error("forbidden")]
    Forbidden,
    #[error("not found")]
    NotFound,
    #[error("already voted")]
    AlreadyVoted,
    #[error("query has not been answered")]
    NotAnswered,
    #[error("query already answered")]
    AlreadyAnswered,
    #[error("no audit awaiting proof")]
    NoPendingAudit,
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("store: {0}")]
    Store(String),
}

type Result<T> = std::result::Result<T, CoordinatorError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProxyStatus {
    Pending,
    Active,
    Banned,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProxyRecord {
    pub pseudonym: String,
    pub agreement_pub: AgreementPublicKey,
    pub signing_pub: SigningPublicKey,
    pub status: ProxyStatus,
    pub supported_backends: Vec<String>,
    pub registered_at: u64,
    pub last_contact: u64,
    pub event_log: Vec<ProxyEvent>,
    /// Unanswered queries, oldest first.
    pub open_queries: Vec<QueryId>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AuditPhase {
    AwaitingResponse,
    AwaitingProof,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditState {
    pub proxy_pseudonym: String,
    pub query_id: QueryId,
    pub backend: String,
    pub expected_query: String,
    /// The user query whose acceptance drew this audit.
    #[serde(default)]
    pub trigger: Option<QueryId>,
    pub expected_response: Option<String>,
    pub phase: AuditPhase,
    #[serde(default, with = "crate::protocol::opt_b64")]
    pub blinded_ecash_request: Option<Vec<u8>>,
    pub issued_at: u64,
    /// PKCS#8 of the audit's ephemeral client key, needed to read the answer.
    client_secret_pem: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct PendingRegistration {
    challenges: Vec<Challenge>,
    deadline: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct IssuedNonce {
    pseudonym: String,
    expires_at: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct StoredQuery {
    envelope: QueryEnvelope,
    delivered_at: Option<u64>,
    response: Option<crate::crypto::SealedBox>,
    responded_at: Option<u64>,
    failed: Option<String>,
    downvoted: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
struct SpentMark(#[serde(with = "crate::wire::b64_array")] [u8; 32]);

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counters {
    pub accepted_queries: u64,
    pub audits_scheduled: u64,
    pub audits_passed: u64,
    pub audits_failed: u64,
    /// Blind signatures handed out as audit rewards.
    pub rewards_issued: u64,
    pub bootstrap_minted: u64,
    /// Tokens the coordinator minted to pay for its own audit envelopes;
    /// they are marked spent at birth and never circulate.
    pub audit_payments: u64,
}

#[derive(Debug, Default, Serialize, Deserialize)]
struct State {
    proxies: BTreeMap<String, ProxyRecord>,
    registrations: BTreeMap<String, PendingRegistration>,
    nonces: BTreeMap<String, IssuedNonce>,
    queries: BTreeMap<QueryId, StoredQuery>,
    audits: BTreeMap<String, AuditState>,
    /// Audit draws waiting for the proxy's current audit to be settled.
    #[serde(default)]
    deferred_audits: BTreeMap<String, Vec<QueryId>>,
    spent: BTreeSet<SpentMark>,
    challenge_nonces: BTreeSet<String>,
    counters: Counters,
}

struct Inner {
    state: State,
    rng: ChaCha20Rng,
}

pub struct Coordinator {
    cfg: CoordinatorConfig,
    keys: CoordinatorKeys,
    issuer_pub: IssuerPublicKey,
    bearer_pub: SigningPublicKey,
    clock: Arc<dyn Clock>,
    schemas: BTreeMap<String, ResponseSchema>,
    questions: QuestionBank,
    store: Option<PathBuf>,
    inner: Mutex<Inner>,
}

impl Coordinator {
    pub fn new(cfg: CoordinatorConfig, keys: CoordinatorKeys, clock: Arc<dyn Clock>) -> Result<Self> {
        cfg.validate().map_err(CoordinatorError::InvalidRequest)?;
        let rng = match cfg.seed {
            Some(s) => ChaCha20Rng::seed_from_u64(s),
            None => ChaCha20Rng::from_entropy(),
        };
        let issuer_pub = keys.issuer.public_key();
        let bearer_pub = keys.bearer.public_key();
        let mut schemas = BTreeMap::new();
        schemas.insert(MOCK_BACKEND_ID.to_string(), ResponseSchema::mock_v1());
        Ok(Self {
            cfg,
            keys,
            issuer_pub,
            bearer_pub,
            clock,
            schemas,
            questions: QuestionBank::bundled(),
            store: None,
            inner: Mutex::new(Inner {
                state: State::default(),
                rng,
            }),
        })
    }

    /// Persists every state change to `path`, resuming from it if present.
    pub fn with_store(mut self, path: impl Into<PathBuf>) -> Result<Self> {
        let path = path.into();
        if path.exists() {
            let text = std::fs::read_to_string(&path).map_err(|e| CoordinatorError::Store(e.to_string()))?;
            let state: State = serde_json::from_str(&text).map_err(|e| CoordinatorError::Store(e.to_string()))?;
            self.inner.get_mut().expect("fresh mutex").state = state;
        }
        self.store = Some(path);
        let inner = self.lock();
        self.commit(&inner)?;
        drop(inner);
        Ok(self)
    }

    pub fn with_schema(mut self, backend: &str, schema: ResponseSchema) -> Self {
        self.schemas.insert(backend.to_string(), schema);
        self
    }

    pub fn with_questions(mut self, bank: QuestionBank) -> Self {
        self.questions = bank;
        self
    }

    pub fn config(&self) -> &CoordinatorConfig {
        &self.cfg
    }

    pub fn issuer_public_key(&self) -> &IssuerPublicKey {
        &self.issuer_pub
    }

    pub fn bearer_public_key(&self) -> &SigningPublicKey {
        &self.bearer_pub
    }

    pub fn store_path(&self) -> Option<&Path> {
        self.store.as_deref()
    }

    pub fn counters(&self) -> Counters {
        self.lock().state.counters
    }

    pub fn spent_count(&self) -> usize {
        self.lock().state.spent.len()
    }

    pub fn proxy_record(&self, pseudonym: &str) -> Option<ProxyRecord> {
        self.lock().state.proxies.get(pseudonym).cloned()
    }

    pub fn pending_audit(&self, pseudonym: &str) -> Option<AuditState> {
        self.lock().state.audits.get(pseudonym).cloned()
    }

    pub fn stored_query_count(&self) -> usize {
        self.lock().state.queries.len()
    }

    /// The JSON that is (or would be) written to the store.
    pub fn snapshot_json(&self) -> String {
        serde_json::to_string(&self.lock().state).expect("state serializes")
    }

    fn lock(&self) -> MutexGuard<'_, Inner> {
        self.inner.lock().unwrap_or_else(|p| p.into_inner())
    }

    fn commit(&self, inner: &Inner) -> Result<()> {
        let Some(path) = &self.store else { return Ok(()) };
        let json = serde_json::to_vec(&inner.state).map_err(|e| CoordinatorError::Store(e.to_string()))?;
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, json).map_err(|e| CoordinatorError::Store(e.to_string()))?;
        std::fs::rename(&tmp, path).map_err(|e| CoordinatorError::Store(e.to_string()))
    }

    fn now(&self) -> u64 {
        self.clock.now_ms()
    }

    pub fn mint_bootstrap(&self, n: u32) -> Result<Vec<ECashToken>> {
        let mut inner = self.lock();
        let tokens: Vec<_> = (0..n).map(|_| self.keys.issuer.mint(&mut inner.rng)).collect();
        inner.state.counters.bootstrap_minted += u64::from(n);
        self.commit(&inner)?;
        Ok(tokens)
    }

    pub fn register_proxy(&self, req: &RegisterRequest) -> Result<ChallengeSet> {
        if req.pseudonym.is_empty() || req.pseudonym.len() > 64 {
            return Err(CoordinatorError::InvalidRequest("pseudonym must be 1-64 bytes".into()));
        }
        let backends: Vec<&String> = req
            .supported_backends
            .iter()
            .filter(|b| self.schemas.contains_key(*b))
            .collect();
        if backends.is_empty() {
            return Err(CoordinatorError::InvalidRequest("no supported backend".into()));
        }
        let now = self.now();
        let mut inner = self.lock();
        let Inner { state, rng } = &mut *inner;
        if let Some(existing) = state.proxies.get(&req.pseudonym) {
            return Err(match existing.status {
                ProxyStatus::Banned => CoordinatorError::BannedPseudonym,
                _ => CoordinatorError::DuplicatePseudonym,
            });
        }
        let mut challenges = Vec::new();
        while challenges.len() < self.cfg.challenges_per_registration {
            let (text, nonce) = self.questions.challenge(rng);
            if state.challenge_nonces.insert(nonce.clone()) {
                let backend = (*backends.choose(rng).expect("non-empty")).clone();
                challenges.push(Challenge { text, nonce, backend });
            }
        }
        let deadline = now + self.cfg.registration_deadline_secs * SEC;
        state.proxies.insert(
            req.pseudonym.clone(),
            ProxyRecord {
                pseudonym: req.pseudonym.clone(),
                agreement_pub: req.agreement_pub.clone(),
                signing_pub: req.signing_pub.clone(),
                status: ProxyStatus::Pending,
                supported_backends: req.supported_backends.clone(),
                registered_at: now,
                last_contact: now,
                event_log: Vec::new(),
                open_queries: Vec::new(),
            },
        );
        state.registrations.insert(
            req.pseudonym.clone(),
            PendingRegistration {
                challenges: challenges.clone(),
                deadline,
            },
        );
        self.commit(&inner)?;
        Ok(ChallengeSet { challenges, deadline })
    }

    /// Activates the proxy if every challenge answer comes with a passing
    /// proof; any failure bans the pseudonym.
    pub fn complete_registration(&self, req: &CompleteRequest) -> Result<RegistrationOutcome> {
        let now = self.now();
        let mut inner = self.lock();
        let state = &mut inner.state;
        let record = state.proxies.get(&req.pseudonym).ok_or(CoordinatorError::UnknownProxy)?;
        if record.status != ProxyStatus::Pending {
            return Err(CoordinatorError::NotPending);
        }
        let reg = state.registrations.remove(&req.pseudonym).ok_or(CoordinatorError::NotPending)?;
        let record = state.proxies.get_mut(&req.pseudonym).expect("checked above");
        if now > reg.deadline {
            record.status = ProxyStatus::Banned;
            self.commit(&inner)?;
            return Err(CoordinatorError::DeadlineExceeded);
        }
        let verdicts: Vec<AuditVerdict> = if req.answers.len() != reg.challenges.len() {
            vec![AuditVerdict::fail(
                FailureReason::StructureViolation,
                "answer count does not match challenge count",
            )]
        } else {
            reg.challenges
                .iter()
                .zip(&req.answers)
                .map(|(c, a)| {
                    check_audit_response(
                        &a.proof,
                        &self.keys.notary,
                        &c.text,
                        &a.response,
                        &self.schemas[&c.backend],
                        self.cfg.proof_max_age_secs,
                        now / SEC,
                    )
                })
                .collect()
        };
        let active = verdicts.iter().all(|v| v.passed);
        record.status = if active { ProxyStatus::Active } else { ProxyStatus::Banned };
        record.last_contact = now;
        self.commit(&inner)?;
        Ok(RegistrationOutcome { active, verdicts })
    }

    pub fn issue_auth_nonce(&self, pseudonym: &str) -> Result<NonceResponse> {
        let now = self.now();
        let mut inner = self.lock();
        let Inner { state, rng } = &mut *inner;
        let record = state.proxies.get(pseudonym).ok_or(CoordinatorError::UnknownProxy)?;
        if record.status != ProxyStatus::Active {
            return Err(CoordinatorError::NotActive);
        }
        let mut nonce = vec![0u8; 32];
        rng.fill_bytes(&mut nonce);
        let expires_at = now + self.cfg.nonce_ttl_secs * SEC;
        state.nonces.retain(|_, n| n.expires_at >= now);
        state.nonces.insert(
            b64_encode(&nonce),
            IssuedNonce {
                pseudonym: pseudonym.to_string(),
                expires_at,
            },
        );
        self.commit(&inner)?;
        Ok(NonceResponse { nonce, expires_at })
    }

    /// Nonces are consumed by the first attempt, successful or not.
    pub fn authenticate(&self, req: &AuthRequest) -> Result<TokenResponse> {
        let now = self.now();
        let mut inner = self.lock();
        let state = &mut inner.state;
        let issued = state.nonces.remove(&b64_encode(&req.nonce));
        self.commit(&inner)?;
        let issued = issued.ok_or(CoordinatorError::NonceInvalid)?;
        if issued.pseudonym != req.pseudonym || now > issued.expires_at {
            return Err(CoordinatorError::NonceInvalid);
        }
        let record = inner
            .state
            .proxies
            .get(&req.pseudonym)
            .ok_or(CoordinatorError::UnknownProxy)?;
        if record.status != ProxyStatus::Active {
            return Err(CoordinatorError::NotActive);
        }
        let msg = auth_message(&req.pseudonym, &req.nonce);
        if !verify_signature(&msg, &req.signature.0, &record.signing_pub) {
            return Err(CoordinatorError::BadSignature);
        }
        let claims = BearerClaims {
            sub: req.pseudonym.clone(),
            iat: now,
            exp: now + self.cfg.token_expiry_secs * SEC,
        };
        Ok(TokenResponse {
            token: bearer::issue(&claims, &self.keys.bearer),
            expires_at: claims.exp,
        })
    }

    /// Resolves a bearer token to an active proxy.
    fn authorize(&self, state: &State, token: &str, now: u64) -> Result<String> {
        let claims = bearer::verify(token, &self.bearer_pub).map_err(|_| CoordinatorError::AuthRejected)?;
        if now >= claims.exp {
            return Err(CoordinatorError::AuthExpired);
        }
        match state.proxies.get(&claims.sub) {
            Some(r) if r.status == ProxyStatus::Active => Ok(claims.sub),
            _ => Err(CoordinatorError::AuthRejected),
        }
    }

    pub fn list_proxies(&self) -> Vec<ProxyListing> {
        let now = self.now();
        let window = self.cfg.active_window_secs * SEC;
        let inner = self.lock();
        inner
            .state
            .proxies
            .values()
            .filter(|r| r.status == ProxyStatus::Active && now.saturating_sub(r.last_contact) <= window)
            .map(|r| ProxyListing {
                pseudonym: r.pseudonym.clone(),
                agreement_pub: r.agreement_pub.clone(),
                supported_backends: r.supported_backends.clone(),
                stats: compute_proxy_stats(&r.event_log, now, self.cfg.sla_threshold_secs * SEC),
            })
            .collect()
    }

    pub fn proxy_stats(&self, pseudonym: &str) -> Option<ProxyStats> {
        let now = self.now();
        let inner = self.lock();
        let r = inner.state.proxies.get(pseudonym)?;
        Some(compute_proxy_stats(&r.event_log, now, self.cfg.sla_threshold_secs * SEC))
    }

    /// Redeems the payment and queues the envelope in one step; the
    /// envelope's `created_at` is overwritten with the coordinator's clock.
    pub fn submit_query(&self, envelope: &QueryEnvelope) -> Result<QueryId> {
        if !ecash_verify(&envelope.payment, &self.issuer_pub) {
            return Err(CoordinatorError::InvalidToken);
        }
        let now = self.now();
        let mut inner = self.lock();
        let state = &mut inner.state;
        match state.proxies.get(&envelope.proxy_pseudonym) {
            None => return Err(CoordinatorError::UnknownProxy),
            Some(r) if r.status != ProxyStatus::Active => return Err(CoordinatorError::ProxyUnavailable),
            Some(_) => {}
        }
        if state.queries.contains_key(&envelope.query_id) {
            return Err(CoordinatorError::InvalidRequest("query id already in use".into()));
        }
        if !state.spent.insert(SpentMark(envelope.payment.message)) {
            return Err(CoordinatorError::DoubleSpend);
        }
        let mut env = envelope.clone();
        env.created_at = now;
        enqueue(state, env, now);
        state.counters.accepted_queries += 1;
        self.maybe_schedule_audit(&mut inner, &envelope.proxy_pseudonym, envelope.query_id);
        self.commit(&inner)?;
        Ok(envelope.query_id)
    }

    /// One Bernoulli(p_a) draw per accepted user query. A hit while another
    /// audit is still outstanding is deferred until that one is settled, so
    /// every draw eventually becomes an audit unless the proxy is banned.
    fn maybe_schedule_audit(&self, inner: &mut Inner, pseudonym: &str, trigger: QueryId) {
        if !inner.rng.gen_bool(self.cfg.p_a) {
            return;
        }
        inner.state.counters.audits_scheduled += 1;
        if inner.state.audits.contains_key(pseudonym) {
            inner.state.deferred_audits.entry(pseudonym.to_string()).or_default().push(trigger);
        } else {
            self.start_audit(inner, pseudonym, trigger);
        }
    }

    fn start_next_deferred(&self, inner: &mut Inner, pseudonym: &str) {
        let next = inner.state.deferred_audits.get_mut(pseudonym).and_then(|d| (!d.is_empty()).then(|| d.remove(0)));
        if let Some(trigger) = next {
            self.start_audit(inner, pseudonym, trigger);
        }
    }

    /// Builds an audit envelope that is field-for-field like a user's and
    /// blocks the proxy's genuine queue until it is settled.
    fn start_audit(&self, inner: &mut Inner, pseudonym: &str, trigger: QueryId) -> Option<QueryId> {
        let Inner { state, rng } = inner;
        if state.audits.contains_key(pseudonym) {
            return None;
        }
        let record = state.proxies.get(pseudonym)?;
        let backends: Vec<&String> = record
            .supported_backends
            .iter()
            .filter(|b| self.schemas.contains_key(*b))
            .collect();
        let backend = (*backends.choose(rng)?).clone();
        let (question, nonce) = self.questions.challenge(rng);
        state.challenge_nonces.insert(nonce);
        let client = generate_identity(rng);
        let query_id = QueryId::random(rng);
        let payload = QueryPayload {
            query: question.clone(),
            backend: backend.clone(),
            thread: None,
        };
        let sealed = seal_json(
            &payload,
            client.agreement(),
            &record.agreement_pub,
            &query_id,
            Direction::Query,
            rng,
        );
        let payment = self.keys.issuer.mint(rng);
        state.spent.insert(SpentMark(payment.message));
        let now = self.now();
        let env = QueryEnvelope {
            query_id,
            proxy_pseudonym: pseudonym.to_string(),
            client_agreement_pub: client.agreement().public_key(),
            client_signing_pub: client.signing().public_key(),
            payload: sealed,
            payment,
            created_at: now,
        };
        enqueue(state, env, now);
        state.audits.insert(
            pseudonym.to_string(),
            AuditState {
                proxy_pseudonym: pseudonym.to_string(),
                query_id,
                backend,
                expected_query: question,
                trigger: Some(trigger),
                expected_response: None,
                phase: AuditPhase::AwaitingResponse,
                blinded_ecash_request: None,
                issued_at: now,
                client_secret_pem: client.agreement().to_pem(),
            },
        );
        state.counters.audit_payments += 1;
        Some(query_id)
    }

    /// Hands out queued envelopes, oldest first. An envelope is delivered
    /// once and redelivered only if it stays unanswered past the retry
    /// timeout. While an audit is outstanding only the audit is delivered.
    pub fn poll_queries(&self, token: &str) -> Result<PollResponse> {
        let now = self.now();
        let mut inner = self.lock();
        let pseudonym = self.authorize(&inner.state, token, now)?;
        if self.expire_audit(&mut inner.state, &pseudonym, now) {
            self.commit(&inner)?;
            return Err(CoordinatorError::AuthRejected);
        }
        let state = &mut inner.state;
        let audit = state.audits.get(&pseudonym).map(|a| (a.query_id, a.phase));
        let record = state.proxies.get_mut(&pseudonym).expect("authorized");
        record.last_contact = now;
        let mut queries = Vec::new();
        let mut proof_requests = Vec::new();
        let redelivery = self.cfg.redelivery_secs * SEC;
        for id in &record.open_queries {
            if let Some((audit_id, _)) = audit {
                if *id != audit_id {
                    continue;
                }
            }
            let q = state.queries.get_mut(id).expect("open query stored");
            let due = q.delivered_at.is_none_or(|t| now.saturating_sub(t) >= redelivery);
            if due {
                q.delivered_at = Some(now);
                queries.push(q.envelope.clone());
            }
        }
        if let Some((id, AuditPhase::AwaitingProof)) = audit {
            proof_requests.push(id);
        }
        self.commit(&inner)?;
        Ok(PollResponse { queries, proof_requests })
    }

    /// Bans a proxy whose delivered audit went unproven for too long.
    fn expire_audit(&self, state: &mut State, pseudonym: &str, now: u64) -> bool {
        let Some(a) = state.audits.get(pseudonym) else { return false };
        let delivered = state.queries.get(&a.query_id).and_then(|q| q.delivered_at);
        let overdue = delivered.is_some_and(|t| now.saturating_sub(t) > self.cfg.audit_timeout_secs * SEC);
        if overdue {
            let a = state.audits.remove(pseudonym).expect("present");
            ban(state, pseudonym, a.query_id, a.issued_at, now, "audit not proven in time");
        }
        overdue
    }

    pub fn submit_response(&self, token: &str, req: &RespondRequest) -> Result<()> {
        let now = self.now();
        let mut inner = self.lock();
        let pseudonym = self.authorize(&inner.state, token, now)?;
        let state = &mut inner.state;
        let q = state.queries.get_mut(&req.query_id).ok_or(CoordinatorError::NotFound)?;
        if q.envelope.proxy_pseudonym != pseudonym {
            return Err(CoordinatorError::Forbidden);
        }
        if q.response.is_some() || q.failed.is_some() {
            return Err(CoordinatorError::AlreadyAnswered);
        }
        q.response = Some(req.payload.clone());
        q.responded_at = Some(now);
        let assigned_at = q.envelope.created_at;
        let record = state.proxies.get_mut(&pseudonym).expect("authorized");
        record.open_queries.retain(|id| *id != req.query_id);
        record.last_contact = now;
        record.event_log.push(ProxyEvent {
            kind: EventKind::ResponseDelivered,
            query_id: req.query_id,
            assigned_at,
            completed_at: Some(now),
        });
        let agreement_pub = record.agreement_pub.clone();

        if let Some(audit) = state.audits.get_mut(&pseudonym).filter(|a| a.query_id == req.query_id) {
            let secret = AgreementSecret::from_pem(&audit.client_secret_pem).expect("own key parses");
            match open_json::<ResponsePayload>(&req.payload, &secret, &agreement_pub, &req.query_id, Direction::Response) {
                Ok(p) if p.status == ResponseStatus::Ok => {
                    audit.expected_response = Some(p.text);
                    audit.phase = AuditPhase::AwaitingProof;
                    audit.blinded_ecash_request = req.blinded_ecash_request.clone();
                }
                // the backend failed; nothing to prove, so the audit is void
                Ok(_) => {
                    state.audits.remove(&pseudonym);
                    self.start_next_deferred(&mut inner, &pseudonym);
                }
                Err(_) => {
                    let a = state.audits.remove(&pseudonym).expect("present");
                    ban(state, &pseudonym, a.query_id, a.issued_at, now, "unreadable audit response");
                }
            }
        }
        self.commit(&inner)
    }

    /// Checks the proof for the outstanding audit. A pass signs the proxy's
    /// blinded e-cash request and lifts the block; a failure bans the proxy.
    pub fn verify_audit(&self, token: &str, req: &AuditProofRequest) -> Result<AuditProofResponse> {
        let now = self.now();
        let mut inner = self.lock();
        let pseudonym = self.authorize(&inner.state, token, now)?;
        let state = &mut inner.state;
        let audit = match state.audits.get(&pseudonym) {
            Some(a) if a.query_id == req.query_id && a.phase == AuditPhase::AwaitingProof => a.clone(),
            _ => return Err(CoordinatorError::NoPendingAudit),
        };
        state.audits.remove(&pseudonym);
        let verdict = check_audit_response(
            &req.proof,
            &self.keys.notary,
            &audit.expected_query,
            audit.expected_response.as_deref().unwrap_or_default(),
            &self.schemas[&audit.backend],
            self.cfg.proof_max_age_secs,
            now / SEC,
        );
        let mut blinded_signature = None;
        if verdict.passed {
            state.counters.audits_passed += 1;
            let record = state.proxies.get_mut(&pseudonym).expect("authorized");
            record.event_log.push(ProxyEvent {
                kind: EventKind::AuditPass,
                query_id: audit.query_id,
                assigned_at: audit.issued_at,
                completed_at: Some(now),
            });
            let blinded = req.blinded_ecash_request.as_ref().or(audit.blinded_ecash_request.as_ref());
            if let Some(sig) = blinded.and_then(|b| ecash_sign_blinded(b, &self.keys.issuer).ok()) {
                state.counters.rewards_issued += 1;
                blinded_signature = Some(sig);
            }
            self.start_next_deferred(&mut inner, &pseudonym);
        } else {
            let why = verdict.detail.clone().unwrap_or_default();
            ban(state, &pseudonym, audit.query_id, audit.issued_at, now, &why);
        }
        self.commit(&inner)?;
        Ok(AuditProofResponse {
            verdict,
            blinded_signature,
        })
    }

    pub fn fetch_response(&self, id: &QueryId) -> Result<FetchResponse> {
        let inner = self.lock();
        let q = inner.state.queries.get(id).ok_or(CoordinatorError::NotFound)?;
        Ok(match (&q.response, &q.failed) {
            (Some(r), _) => FetchResponse {
                status: FetchStatus::Ready,
                payload: Some(r.clone()),
                reason: None,
            },
            (None, Some(why)) => FetchResponse {
                status: FetchStatus::Failed,
                payload: None,
                reason: Some(why.clone()),
            },
            (None, None) => FetchResponse {
                status: FetchStatus::Pending,
                payload: None,
                reason: None,
            },
        })
    }

    pub fn downvote(&self, id: &QueryId, req: &DownvoteRequest) -> Result<()> {
        let now = self.now();
        let mut inner = self.lock();
        let state = &mut inner.state;
        let q = state.queries.get_mut(id).ok_or(CoordinatorError::NotFound)?;
        if !verify_signature(&downvote_message(id), &req.signature.0, &q.envelope.client_signing_pub) {
            return Err(CoordinatorError::Forbidden);
        }
        if q.response.is_none() {
            return Err(CoordinatorError::NotAnswered);
        }
        if q.downvoted {
            return Err(CoordinatorError::AlreadyVoted);
        }
        q.downvoted = true;
        let assigned_at = q.envelope.created_at;
        if let Some(r) = state.proxies.get_mut(&q.envelope.proxy_pseudonym) {
            r.event_log.push(ProxyEvent {
                kind: EventKind::Downvote,
                query_id: *id,
                assigned_at,
                completed_at: Some(now),
            });
        }
        self.commit(&inner)
    }

    /// Drops envelopes and responses older than the retention period. Proxy
    /// records and the spent ledger are kept.
    pub fn purge_expired(&self) -> Result<usize> {
        let now = self.now();
        let retention = self.cfg.retention_days * DAY;
        let mut inner = self.lock();
        let state = &mut inner.state;
        let expired: Vec<QueryId> = state
            .queries
            .iter()
            .filter(|(_, q)| now.saturating_sub(q.envelope.created_at) > retention)
            .map(|(id, _)| *id)
            .collect();
        for id in &expired {
            let q = state.queries.remove(id).expect("listed");
            if let Some(r) = state.proxies.get_mut(&q.envelope.proxy_pseudonym) {
                r.open_queries.retain(|o| o != id);
            }
        }
        state.nonces.retain(|_, n| n.expires_at >= now);
        if !expired.is_empty() {
            self.commit(&inner)?;
        }
        Ok(expired.len())
    }
}

fn enqueue(state: &mut State, env: QueryEnvelope, now: u64) {
    let record = state.proxies.get_mut(&env.proxy_pseudonym).expect("caller checked proxy");
    record.open_queries.push(env.query_id);
    record.event_log.push(ProxyEvent {
        kind: EventKind::QueryAssigned,
        query_id: env.query_id,
        assigned_at: now,
        completed_at: None,
    });
    state.queries.insert(
        env.query_id,
        StoredQuery {
            envelope: env,
            delivered_at: None,
            response: None,
            responded_at: None,
            failed: None,
            downvoted: false,
        },
    );
}

fn ban(state: &mut State, pseudonym: &str, audit_id: QueryId, issued_at: u64, now: u64, why: &str) {
    state.counters.audits_failed += 1;
    let Some(record) = state.proxies.get_mut(pseudonym) else { return };
    record.status = ProxyStatus::Banned;
    record.event_log.push(ProxyEvent {
        kind: EventKind::AuditFail,
        query_id: audit_id,
        assigned_at: issued_at,
        completed_at: Some(now),
    });
    log::info!("banned proxy {pseudonym}: {why}");
    state.deferred_audits.remove(pseudonym);
    for id in std::mem::take(&mut record.open_queries) {
        if let Some(q) = state.queries.get_mut(&id) {
            q.failed = Some("proxy removed from service".into());
        }
    }
}
