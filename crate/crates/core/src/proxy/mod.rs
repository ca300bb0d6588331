//! The volunteer proxy: answers sealed queries through its own chatbot
//! account, proves audited answers, and collects e-cash for them.

mod agent;
mod driver;
mod wallet;

pub use agent::{Agent, AgentConfig, AgentError, HourlyLimiter, TickReport};
pub use driver::{
    handle_query, ClockPause, DriverError, DriverOutcome, DriverPhase, DriverWaits, Pause, QueryJob,
    SleepPause, ThreadBook,
};
pub use wallet::{Wallet, WalletError};

use std::collections::{BTreeMap, VecDeque};

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::chatbot::{lorem, BackendError, ChatbotBackend, MockChatbotConfig};
use crate::crypto::{ecash_blind, CryptoError, IdentityKeys, IssuerPublicKey, SealedBox, ECASH_MESSAGE_LEN};
use crate::protocol::{
    auth_message, open_json, seal_json, AuditProofRequest, AuditProofResponse, AuthRequest, ChallengeAnswer,
    ChallengeSet, CompleteRequest, Direction, OpenError, QueryEnvelope, QueryId, QueryPayload,
    RegisterRequest, RespondRequest, ResponsePayload, ResponseStatus,
};
use crate::provenance::{build_proof, plan_reveal, Notary, ProvenanceError, ResponseSchema};

/// Whether the proxy actually consults the chatbot. Anything other than
/// `Honest` exists to model misbehaving proxies in simulations and tests.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Honesty {
    Honest,
    /// Answers honestly with probability `p_h`, otherwise fabricates filler
    /// of plausible length without touching the chatbot.
    Strategic { p_h: f64 },
}

#[derive(Debug, Error)]
pub enum ProxyError {
    #[error("cannot open query payload: {0}")]
    Open(#[from] OpenError),
    #[error("no record of answering {0}")]
    UnknownQuery(QueryId),
    #[error(transparent)]
    Driver(#[from] DriverError),
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Provenance(#[from] ProvenanceError),
    #[error(transparent)]
    Crypto(#[from] CryptoError),
    #[error(transparent)]
    Wallet(#[from] WalletError),
    #[error("no schema for backend {0}")]
    NoSchema(String),
}

const ANSWER_MEMORY: usize = 1024;

#[derive(Debug, Clone)]
struct Answered {
    query: String,
    backend: String,
    /// `None` when the answer was fabricated.
    thread_id: Option<String>,
}

/// Result of handling one envelope.
#[derive(Debug, Clone)]
pub struct Handled {
    pub respond: RespondRequest,
    pub status: ResponseStatus,
    pub fabricated: bool,
    pub response_chars: usize,
    /// Time spent driving the chatbot (or pretending to).
    pub elapsed_ms: u64,
    pub outcome: Option<DriverOutcome>,
}

pub struct ProxyCore {
    pseudonym: String,
    identity: IdentityKeys,
    backend: Box<dyn ChatbotBackend>,
    book: ThreadBook,
    wallet: Wallet,
    issuer: IssuerPublicKey,
    waits: DriverWaits,
    honesty: Honesty,
    answered: BTreeMap<QueryId, Answered>,
    answer_order: VecDeque<QueryId>,
    rng: ChaCha20Rng,
    filler: MockChatbotConfig,
}

impl ProxyCore {
    pub fn new(
        pseudonym: impl Into<String>,
        identity: IdentityKeys,
        backend: Box<dyn ChatbotBackend>,
        issuer: IssuerPublicKey,
        waits: DriverWaits,
        seed: Option<u64>,
    ) -> Self {
        Self {
            pseudonym: pseudonym.into(),
            identity,
            backend,
            book: ThreadBook::default(),
            wallet: Wallet::default(),
            issuer,
            waits,
            honesty: Honesty::Honest,
            answered: BTreeMap::new(),
            answer_order: VecDeque::new(),
            rng: seed.map_or_else(ChaCha20Rng::from_entropy, ChaCha20Rng::seed_from_u64),
            filler: MockChatbotConfig::default(),
        }
    }

    pub fn with_honesty(mut self, honesty: Honesty) -> Self {
        self.honesty = honesty;
        self
    }

    pub fn with_wallet(mut self, wallet: Wallet) -> Self {
        self.wallet = wallet;
        self
    }

    pub fn pseudonym(&self) -> &str {
        &self.pseudonym
    }

    pub fn wallet(&self) -> &Wallet {
        &self.wallet
    }

    pub fn wallet_mut(&mut self) -> &mut Wallet {
        &mut self.wallet
    }

    pub fn backend(&self) -> &dyn ChatbotBackend {
        self.backend.as_ref()
    }

    pub fn register_request(&self) -> RegisterRequest {
        let b = self.identity.public_bundle();
        RegisterRequest {
            pseudonym: self.pseudonym.clone(),
            agreement_pub: b.agreement,
            signing_pub: b.signing,
            supported_backends: vec![self.backend.id().to_string()],
        }
    }

    pub fn auth_request(&self, nonce: &[u8]) -> AuthRequest {
        AuthRequest {
            pseudonym: self.pseudonym.clone(),
            nonce: nonce.to_vec(),
            signature: self.identity.sign(&auth_message(&self.pseudonym, nonce)),
        }
    }

    fn run_driver(&mut self, query: &str, backend: &str, pause: &mut dyn Pause) -> Result<DriverOutcome, DriverError> {
        let job = QueryJob {
            query_id: QueryId([0; 16]),
            query_text: query.to_string(),
            backend_id: backend.to_string(),
            thread_id: None,
            thread_ownership_sig: None,
            client_agreement_pub: self.identity.agreement().public_key(),
            client_signing_pub: self.identity.signing().public_key(),
            attempt_count: 0,
        };
        handle_query(&job, self.backend.as_mut(), &ThreadBook::default(), &self.waits, pause)
    }

    fn prove_thread(&self, thread_id: &str, query: &str, notary: &dyn Notary) -> Result<crate::provenance::RedactedProof, ProxyError> {
        let transcript = self.backend.fetch_conversation(thread_id)?;
        let schema = schema_for(self.backend.id())?;
        let notarization = notary.notarize(&transcript)?;
        let ranges = plan_reveal(&transcript, &schema, query)?;
        log::debug!("proving {} bytes of exchange for {query:?}", transcript.response.len());
        Ok(build_proof(&transcript, &notarization.salts, &notarization.commitment, &ranges)?)
    }

    /// Asks the chatbot each challenge question and proves the exchanges.
    pub fn answer_challenges(
        &mut self,
        set: &ChallengeSet,
        notary: &dyn Notary,
        pause: &mut dyn Pause,
    ) -> Result<CompleteRequest, ProxyError> {
        let mut answers = Vec::new();
        for c in &set.challenges {
            let out = self.run_driver(&c.text, &c.backend, pause)?;
            let proof = self.prove_thread(&out.thread_id, &c.text, notary)?;
            answers.push(ChallengeAnswer {
                response: out.response,
                proof,
            });
        }
        Ok(CompleteRequest {
            pseudonym: self.pseudonym.clone(),
            answers,
        })
    }

    /// Keeps the most recent answers around in case one of them turns out
    /// to be an audit; a proof request can arrive several polls after the
    /// answer was sent.
    fn remember(&mut self, id: QueryId, a: Answered) {
        self.answered.insert(id, a);
        self.answer_order.push_back(id);
        while self.answer_order.len() > ANSWER_MEMORY {
            if let Some(old) = self.answer_order.pop_front() {
                self.answered.remove(&old);
            }
        }
    }

    pub fn open_envelope(&self, env: &QueryEnvelope) -> Result<QueryPayload, ProxyError> {
        Ok(open_json(
            &env.payload,
            self.identity.agreement(),
            &env.client_agreement_pub,
            &env.query_id,
            Direction::Query,
        )?)
    }

    pub fn handle_envelope(&mut self, env: &QueryEnvelope, pause: &mut dyn Pause) -> Result<Handled, ProxyError> {
        let payload = self.open_envelope(env)?;
        let honest = match self.honesty {
            Honesty::Honest => true,
            Honesty::Strategic { p_h } => self.rng.gen_bool(p_h),
        };
        let job = QueryJob {
            query_id: env.query_id,
            query_text: payload.query.clone(),
            backend_id: payload.backend.clone(),
            thread_id: payload.thread.as_ref().map(|t| t.thread_id.clone()),
            thread_ownership_sig: payload.thread.as_ref().map(|t| t.ownership_sig),
            client_agreement_pub: env.client_agreement_pub.clone(),
            client_signing_pub: env.client_signing_pub.clone(),
            attempt_count: 0,
        };

        let (response, elapsed_ms, outcome) = if honest {
            match handle_query(&job, self.backend.as_mut(), &self.book, &self.waits, pause) {
                Ok(out) => {
                    self.book.record(&out.thread_id, env.query_id, env.client_signing_pub.clone());
                    self.remember(
                        env.query_id,
                        Answered {
                            query: payload.query.clone(),
                            backend: payload.backend.clone(),
                            thread_id: Some(out.thread_id.clone()),
                        },
                    );
                    let p = ResponsePayload::ok(out.response.clone(), out.thread_id.clone());
                    (p, out.elapsed_ms, Some(out))
                }
                Err(e) => (ResponsePayload::failure(e.to_string()), 0, None),
            }
        } else {
            let len = self.filler.sample_len(&mut self.rng);
            let text = lorem(&mut self.rng, len);
            let thread = format!("{:032x}", self.rng.gen::<u128>());
            self.remember(
                env.query_id,
                Answered {
                    query: payload.query.clone(),
                    backend: payload.backend.clone(),
                    thread_id: None,
                },
            );
            let elapsed = self.waits.mandated_ms();
            pause.pause(elapsed);
            (ResponsePayload::ok(text, thread), elapsed, None)
        };

        let sealed = self.encrypt_response(&response, env);
        Ok(Handled {
            respond: RespondRequest {
                query_id: env.query_id,
                payload: sealed,
                blinded_ecash_request: None,
            },
            status: response.status,
            fabricated: !honest,
            response_chars: response.text.len(),
            elapsed_ms,
            outcome,
        })
    }

    pub fn encrypt_response(&mut self, response: &ResponsePayload, env: &QueryEnvelope) -> SealedBox {
        encrypt_response(response, &env.query_id, &env.client_agreement_pub, &self.identity, &mut self.rng)
    }

    /// Builds the proof for an answer the coordinator wants to audit, and
    /// blinds a fresh e-cash message to be signed if it passes.
    ///
    /// A proxy that fabricated the answer has no exchange to show, so it
    /// asks the chatbot now and proves that; the content will not match.
    pub fn prove(&mut self, id: &QueryId, notary: &dyn Notary, pause: &mut dyn Pause) -> Result<AuditProofRequest, ProxyError> {
        let answered = self.answered.get(id).cloned().ok_or(ProxyError::UnknownQuery(*id))?;
        let thread = match &answered.thread_id {
            Some(t) => t.clone(),
            None => self.run_driver(&answered.query, &answered.backend, pause)?.thread_id,
        };
        let proof = self.prove_thread(&thread, &answered.query, notary)?;
        let mut message = [0u8; ECASH_MESSAGE_LEN];
        self.rng.fill_bytes(&mut message);
        let (blinded, secret) = ecash_blind(&message, &self.issuer, &mut self.rng)?;
        self.wallet.hold_pending(*id, secret);
        Ok(AuditProofRequest {
            query_id: *id,
            proof,
            blinded_ecash_request: Some(blinded),
        })
    }

    /// Unblinds the reward if the audit passed. Returns whether it did.
    pub fn accept_verdict(&mut self, id: &QueryId, resp: &AuditProofResponse) -> Result<bool, ProxyError> {
        self.answered.remove(id);
        match (&resp.verdict.passed, &resp.blinded_signature) {
            (true, Some(sig)) => {
                self.wallet.redeem(id, sig, &self.issuer)?;
                Ok(true)
            }
            _ => {
                self.wallet.drop_pending(id);
                Ok(resp.verdict.passed)
            }
        }
    }
}

pub fn schema_for(backend: &str) -> Result<ResponseSchema, ProxyError> {
    let s = ResponseSchema::mock_v1();
    if s.name == backend {
        Ok(s)
    } else {
        Err(ProxyError::NoSchema(backend.to_string()))
    }
}

/// Seals a response so only the holder of the query's ephemeral key can
/// read it, bound to the query's slot.
pub fn encrypt_response(
    response: &ResponsePayload,
    query_id: &QueryId,
    client_agreement_pub: &crate::crypto::AgreementPublicKey,
    me: &IdentityKeys,
    rng: &mut impl crate::crypto::SecureRng,
) -> SealedBox {
    seal_json(response, me.agreement(), client_agreement_pub, query_id, Direction::Response, rng)
}
