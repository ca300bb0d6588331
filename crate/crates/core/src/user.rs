//! The user side: seal a query for a chosen proxy, pay with e-cash, collect
//! and open the answer. Every query uses fresh key pairs, so nothing but the
//! thread itself links a user's queries together.

use std::time::Duration;

use rand::seq::SliceRandom;
use thiserror::Error;

use crate::api::{ApiError, CoordinatorApi};
use crate::crypto::{generate_identity, AgreementPublicKey, ECashToken, IdentityKeys, SecureRng};
use crate::protocol::{
    downvote_message, open_json, ownership_message, seal_json, Direction, DownvoteRequest, FetchResponse,
    FetchStatus, OpenError, ProxyListing, QueryEnvelope, QueryId, QueryPayload, ResponsePayload,
    ResponseStatus, ThreadContinuation,
};

#[derive(Debug, Error)]
pub enum UserError {
    #[error(transparent)]
    Api(#[from] ApiError),
    #[error("cannot open response: {0}")]
    Open(#[from] OpenError),
    #[error("no listed proxy supports {0}")]
    NoProxy(String),
    #[error("query failed: {0}")]
    Failed(String),
    #[error("no response after {0} ms")]
    Timeout(u64),
}

/// Lets a later query continue the same chatbot thread.
#[derive(Clone)]
pub struct ThreadHandle {
    pub thread_id: String,
    pub proxy_pseudonym: String,
    pub proxy_agreement_pub: AgreementPublicKey,
    latest: QueryId,
    latest_keys: IdentityKeys,
}

/// Everything needed to read, continue or downvote a submitted query.
pub struct PendingQuery {
    pub envelope: QueryEnvelope,
    keys: IdentityKeys,
    proxy_agreement_pub: AgreementPublicKey,
}

impl PendingQuery {
    pub fn query_id(&self) -> QueryId {
        self.envelope.query_id
    }

    pub fn open(&self, fetched: &FetchResponse) -> Result<Option<ResponsePayload>, UserError> {
        match fetched.status {
            FetchStatus::Pending => Ok(None),
            FetchStatus::Failed => Err(UserError::Failed(fetched.reason.clone().unwrap_or_default())),
            FetchStatus::Ready => {
                let sealed = fetched.payload.as_ref().ok_or(UserError::Failed("empty payload".into()))?;
                Ok(Some(open_json(
                    sealed,
                    self.keys.agreement(),
                    &self.proxy_agreement_pub,
                    &self.envelope.query_id,
                    Direction::Response,
                )?))
            }
        }
    }

    /// A handle for follow-ups, if the answer named a thread.
    pub fn thread(&self, response: &ResponsePayload) -> Option<ThreadHandle> {
        let thread_id = response.thread_id.clone()?;
        (response.status == ResponseStatus::Ok).then(|| ThreadHandle {
            thread_id,
            proxy_pseudonym: self.envelope.proxy_pseudonym.clone(),
            proxy_agreement_pub: self.proxy_agreement_pub.clone(),
            latest: self.envelope.query_id,
            latest_keys: self.keys.clone(),
        })
    }

    pub fn downvote_request(&self) -> DownvoteRequest {
        DownvoteRequest {
            signature: self.keys.sign(&downvote_message(&self.envelope.query_id)),
        }
    }
}

/// Picks uniformly among listed proxies that serve `backend`.
pub fn choose_proxy<'a>(listings: &'a [ProxyListing], backend: &str, rng: &mut impl rand::Rng) -> Option<&'a ProxyListing> {
    let eligible: Vec<&ProxyListing> = listings
        .iter()
        .filter(|l| l.supported_backends.iter().any(|b| b == backend))
        .collect();
    eligible.choose(rng).copied()
}

/// Seals a new query. A follow-up goes to the thread's proxy and carries a
/// signature by the previous query's key over that query's id.
pub fn prepare_query(
    proxy: &ProxyListing,
    query: &str,
    backend: &str,
    thread: Option<&ThreadHandle>,
    payment: ECashToken,
    rng: &mut impl SecureRng,
) -> PendingQuery {
    let keys = generate_identity(rng);
    let query_id = QueryId::random(rng);
    let (pseudonym, proxy_pub) = match thread {
        Some(t) => (t.proxy_pseudonym.clone(), t.proxy_agreement_pub.clone()),
        None => (proxy.pseudonym.clone(), proxy.agreement_pub.clone()),
    };
    let payload = QueryPayload {
        query: query.to_string(),
        backend: backend.to_string(),
        thread: thread.map(|t| ThreadContinuation {
            thread_id: t.thread_id.clone(),
            ownership_sig: t.latest_keys.sign(&ownership_message(&t.latest)),
        }),
    };
    let sealed = seal_json(&payload, keys.agreement(), &proxy_pub, &query_id, Direction::Query, rng);
    let b = keys.public_bundle();
    PendingQuery {
        envelope: QueryEnvelope {
            query_id,
            proxy_pseudonym: pseudonym,
            client_agreement_pub: b.agreement,
            client_signing_pub: b.signing,
            payload: sealed,
            payment,
            created_at: 0,
        },
        keys,
        proxy_agreement_pub: proxy_pub,
    }
}

/// Submits and polls until the answer arrives, fails, or `timeout_ms`
/// passes.
pub fn ask_blocking(
    api: &dyn CoordinatorApi,
    pending: &PendingQuery,
    poll_ms: u64,
    timeout_ms: u64,
) -> Result<ResponsePayload, UserError> {
    api.submit_query(&pending.envelope)?;
    let started = std::time::Instant::now();
    loop {
        if let Some(r) = pending.open(&api.fetch_response(&pending.query_id())?)? {
            return Ok(r);
        }
        if started.elapsed() >= Duration::from_millis(timeout_ms) {
            return Err(UserError::Timeout(timeout_ms));
        }
        std::thread::sleep(Duration::from_millis(poll_ms));
    }
}
