//! HTTP+JSON transport for the coordinator and notary, and blocking
//! clients that speak it.
//!
//! Errors travel as `{"error": <code>, "message": <text>}` with a status
//! derived from the code, so a client can rebuild the typed error.

use std::net::SocketAddr;
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::Duration;

use axum::body::Bytes;
use axum::extract::{Path, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::api::{ApiError, CoordinatorApi};
use crate::coordinator::CoordinatorError;
use crate::crypto::{IssuerPublicKey, SigningPublicKey};
use crate::protocol::{
    AuditProofRequest, AuditProofResponse, AuthRequest, ChallengeSet, CompleteRequest, DownvoteRequest,
    FetchResponse, NonceRequest, NonceResponse, PollResponse, ProxyListing, QueryEnvelope, QueryId,
    RegisterRequest, RegistrationOutcome, RespondRequest, SubmitResponse, TokenResponse,
};
use crate::provenance::{Notarization, Notary, ProvenanceError, SessionTranscript};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: String,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KeyResponse {
    pub public_key: String,
}

pub fn error_code(e: &CoordinatorError) -> &'static str {
    use CoordinatorError::*;
    match e {
        DuplicatePseudonym => "duplicate_pseudonym",
        BannedPseudonym => "banned_pseudonym",
        UnknownProxy => "unknown_proxy",
        ProxyUnavailable => "proxy_unavailable",
        NotPending => "not_pending",
        DeadlineExceeded => "deadline_exceeded",
        NotActive => "not_active",
        NonceInvalid => "nonce_invalid",
        BadSignature => "bad_signature",
        AuthExpired => "auth_expired",
        AuthRejected => "auth_rejected",
        InvalidToken => "invalid_token",
        DoubleSpend => "double_spend",
        Forbidden => "forbidden",
        NotFound => "not_found",
        AlreadyVoted => "already_voted",
        NotAnswered => "not_answered",
        AlreadyAnswered => "already_answered",
        NoPendingAudit => "no_pending_audit",
        InvalidRequest(_) => "invalid_request",
        Store(_) => "store",
    }
}

pub fn error_from_code(code: &str, message: &str) -> Option<CoordinatorError> {
    use CoordinatorError::*;
    Some(match code {
        "duplicate_pseudonym" => DuplicatePseudonym,
        "banned_pseudonym" => BannedPseudonym,
        "unknown_proxy" => UnknownProxy,
        "proxy_unavailable" => ProxyUnavailable,
        "not_pending" => NotPending,
        "deadline_exceeded" => DeadlineExceeded,
        "not_active" => NotActive,
        "nonce_invalid" => NonceInvalid,
        "bad_signature" => BadSignature,
        "auth_expired" => AuthExpired,
        "auth_rejected" => AuthRejected,
        "invalid_token" => InvalidToken,
        "double_spend" => DoubleSpend,
        "forbidden" => Forbidden,
        "not_found" => NotFound,
        "already_voted" => AlreadyVoted,
        "not_answered" => NotAnswered,
        "already_answered" => AlreadyAnswered,
        "no_pending_audit" => NoPendingAudit,
        "invalid_request" => InvalidRequest(strip_prefix(message, "invalid request: ")),
        "store" => Store(strip_prefix(message, "store: ")),
        _ => return None,
    })
}

fn strip_prefix(message: &str, prefix: &str) -> String {
    message.strip_prefix(prefix).unwrap_or(message).to_string()
}

pub fn error_status(e: &CoordinatorError) -> StatusCode {
    use CoordinatorError::*;
    match e {
        InvalidRequest(_) => StatusCode::BAD_REQUEST,
        NonceInvalid | BadSignature | AuthExpired | AuthRejected => StatusCode::UNAUTHORIZED,
        InvalidToken => StatusCode::PAYMENT_REQUIRED,
        BannedPseudonym | NotActive | Forbidden => StatusCode::FORBIDDEN,
        UnknownProxy | NotFound => StatusCode::NOT_FOUND,
        DeadlineExceeded => StatusCode::GONE,
        ProxyUnavailable => StatusCode::SERVICE_UNAVAILABLE,
        DuplicatePseudonym | NotPending | DoubleSpend | AlreadyVoted | NotAnswered | AlreadyAnswered
        | NoPendingAudit => StatusCode::CONFLICT,
        Store(_) => StatusCode::INTERNAL_SERVER_ERROR,
    }
}

struct HttpError(StatusCode, ErrorBody);

impl IntoResponse for HttpError {
    fn into_response(self) -> Response {
        (self.0, Json(self.1)).into_response()
    }
}

impl From<ApiError> for HttpError {
    fn from(e: ApiError) -> Self {
        match e {
            ApiError::Coordinator(c) => Self(
                error_status(&c),
                ErrorBody { error: error_code(&c).into(), message: c.to_string() },
            ),
            ApiError::Transport(m) => Self(
                StatusCode::BAD_GATEWAY,
                ErrorBody { error: "transport".into(), message: m },
            ),
        }
    }
}

impl From<CoordinatorError> for HttpError {
    fn from(e: CoordinatorError) -> Self {
        ApiError::Coordinator(e).into()
    }
}

fn parse<T: DeserializeOwned>(body: &[u8]) -> Result<T, HttpError> {
    serde_json::from_slice(body).map_err(|e| CoordinatorError::InvalidRequest(e.to_string()).into())
}

fn bearer(headers: &HeaderMap) -> Result<String, HttpError> {
    headers
        .get(header::AUTHORIZATION)
        .and_then(|v| v.to_str().ok())
        .and_then(|v| v.strip_prefix("Bearer "))
        .map(|t| t.trim().to_string())
        .ok_or_else(|| CoordinatorError::AuthRejected.into())
}

fn query_id(raw: &str) -> Result<QueryId, HttpError> {
    raw.parse().map_err(|e: String| CoordinatorError::InvalidRequest(e).into())
}

/// Runs a (blocking, lock-taking) coordinator call off the async workers.
async fn blocking<T, F>(f: F) -> Result<T, HttpError>
where
    T: Send + 'static,
    F: FnOnce() -> Result<T, ApiError> + Send + 'static,
{
    match tokio::task::spawn_blocking(f).await {
        Ok(r) => r.map_err(HttpError::from),
        Err(e) => Err(CoordinatorError::Store(format!("handler panicked: {e}")).into()),
    }
}

type Api = Arc<dyn CoordinatorApi>;

pub fn coordinator_router(api: Api) -> Router {
    Router::new()
        .route("/health", get(health))
        .route("/issuer-key", get(issuer_key))
        .route("/proxies/register", post(register))
        .route("/proxies/complete", post(complete))
        .route("/auth/nonce", post(auth_nonce))
        .route("/auth/token", post(auth_token))
        .route("/proxies", get(list_proxies))
        .route("/queries", post(submit_query))
        .route("/queries/{id}/response", get(fetch_response))
        .route("/queries/{id}/downvote", post(downvote))
        .route("/proxy/poll", post(poll))
        .route("/proxy/respond", post(respond))
        .route("/proxy/audit-proof", post(audit_proof))
        .with_state(api)
}

async fn health() -> Json<serde_json::Value> {
    Json(serde_json::json!({ "status": "ok" }))
}

async fn issuer_key(State(api): State<Api>) -> Result<Json<KeyResponse>, HttpError> {
    let key = blocking(move || api.issuer_key()).await?;
    Ok(Json(KeyResponse { public_key: key.to_base64() }))
}

async fn register(State(api): State<Api>, body: Bytes) -> Result<Json<ChallengeSet>, HttpError> {
    let req: RegisterRequest = parse(&body)?;
    Ok(Json(blocking(move || api.register(&req)).await?))
}

async fn complete(State(api): State<Api>, body: Bytes) -> Result<Json<RegistrationOutcome>, HttpError> {
    let req: CompleteRequest = parse(&body)?;
    Ok(Json(blocking(move || api.complete(&req)).await?))
}

async fn auth_nonce(State(api): State<Api>, body: Bytes) -> Result<Json<NonceResponse>, HttpError> {
    let req: NonceRequest = parse(&body)?;
    Ok(Json(blocking(move || api.auth_nonce(&req.pseudonym)).await?))
}

async fn auth_token(State(api): State<Api>, body: Bytes) -> Result<Json<TokenResponse>, HttpError> {
    let req: AuthRequest = parse(&body)?;
    Ok(Json(blocking(move || api.auth_token(&req)).await?))
}

async fn list_proxies(State(api): State<Api>) -> Result<Json<Vec<ProxyListing>>, HttpError> {
    Ok(Json(blocking(move || api.list_proxies()).await?))
}

async fn submit_query(State(api): State<Api>, body: Bytes) -> Result<Json<SubmitResponse>, HttpError> {
    let env: QueryEnvelope = parse(&body)?;
    let query_id = blocking(move || api.submit_query(&env)).await?;
    Ok(Json(SubmitResponse { query_id }))
}

async fn fetch_response(
    State(api): State<Api>,
    Path(id): Path<String>,
) -> Result<Json<FetchResponse>, HttpError> {
    let id = query_id(&id)?;
    Ok(Json(blocking(move || api.fetch_response(&id)).await?))
}

async fn downvote(State(api): State<Api>, Path(id): Path<String>, body: Bytes) -> Result<StatusCode, HttpError> {
    let id = query_id(&id)?;
    let req: DownvoteRequest = parse(&body)?;
    blocking(move || api.downvote(&id, &req)).await?;
    Ok(StatusCode::NO_CONTENT)
}

async fn poll(State(api): State<Api>, headers: HeaderMap) -> Result<Json<PollResponse>, HttpError> {
    let token = bearer(&headers)?;
    Ok(Json(blocking(move || api.poll(&token)).await?))
}

async fn respond(State(api): State<Api>, headers: HeaderMap, body: Bytes) -> Result<StatusCode, HttpError> {
    let token = bearer(&headers)?;
    let req: RespondRequest = parse(&body)?;
    blocking(move || api.respond(&token, &req)).await?;
    Ok(StatusCode::NO_CONTENT)
}

async fn audit_proof(
    State(api): State<Api>,
    headers: HeaderMap,
    body: Bytes,
) -> Result<Json<AuditProofResponse>, HttpError> {
    let token = bearer(&headers)?;
    let req: AuditProofRequest = parse(&body)?;
    Ok(Json(blocking(move || api.audit_proof(&token, &req)).await?))
}

type NotaryState = Arc<dyn Notary>;

pub fn notary_router(notary: NotaryState) -> Router {
    Router::new()
        .route("/health", get(health))
        .route("/key", get(notary_key))
        .route("/notarize", post(notarize))
        .with_state(notary)
}

async fn notary_key(State(notary): State<NotaryState>) -> Json<KeyResponse> {
    Json(KeyResponse { public_key: notary.public_key().to_base64() })
}

async fn notarize(State(notary): State<NotaryState>, body: Bytes) -> Response {
    let transcript: SessionTranscript = match serde_json::from_slice(&body) {
        Ok(t) => t,
        Err(e) => return notary_error(StatusCode::BAD_REQUEST, "invalid_request", e.to_string()),
    };
    match tokio::task::spawn_blocking(move || notary.notarize(&transcript)).await {
        Ok(Ok(n)) => Json(n).into_response(),
        Ok(Err(e @ ProvenanceError::TooLarge(..))) => {
            notary_error(StatusCode::PAYLOAD_TOO_LARGE, "too_large", e.to_string())
        }
        Ok(Err(e)) => notary_error(StatusCode::BAD_REQUEST, "rejected", e.to_string()),
        Err(e) => notary_error(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string()),
    }
}

fn notary_error(status: StatusCode, code: &str, message: String) -> Response {
    (status, Json(ErrorBody { error: code.into(), message })).into_response()
}

/// A server running on its own thread and runtime; stops when dropped.
pub struct ServerHandle {
    addr: SocketAddr,
    shutdown: Option<tokio::sync::oneshot::Sender<()>>,
    thread: Option<JoinHandle<()>>,
}

impl ServerHandle {
    pub fn spawn(router: Router, addr: SocketAddr) -> std::io::Result<Self> {
        let std_listener = std::net::TcpListener::bind(addr)?;
        std_listener.set_nonblocking(true)?;
        let addr = std_listener.local_addr()?;
        let (tx, rx) = tokio::sync::oneshot::channel::<()>();
        let runtime = tokio::runtime::Builder::new_multi_thread().worker_threads(2).enable_all().build()?;
        let thread = std::thread::spawn(move || {
            runtime.block_on(async move {
                let listener = tokio::net::TcpListener::from_std(std_listener).expect("adopt listener");
                let _ = axum::serve(listener, router)
                    .with_graceful_shutdown(async {
                        let _ = rx.await;
                    })
                    .await;
            });
        });
        Ok(Self { addr, shutdown: Some(tx), thread: Some(thread) })
    }

    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn url(&self) -> String {
        format!("http://{}", self.addr)
    }
}

impl Drop for ServerHandle {
    fn drop(&mut self) {
        if let Some(tx) = self.shutdown.take() {
            let _ = tx.send(());
        }
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

/// Serves until Ctrl-C.
pub async fn serve_until_interrupt(listener: tokio::net::TcpListener, router: Router) -> std::io::Result<()> {
    axum::serve(listener, router)
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}

fn client(timeout: Duration) -> reqwest::blocking::Client {
    reqwest::blocking::Client::builder().timeout(timeout).build().expect("http client")
}

/// A coordinator reached over HTTP. Must not be used from inside an async
/// runtime (it drives its own).
pub struct HttpCoordinator {
    base: String,
    http: reqwest::blocking::Client,
}

impl HttpCoordinator {
    pub fn new(base_url: &str) -> Self {
        Self::with_timeout(base_url, Duration::from_secs(30))
    }

    pub fn with_timeout(base_url: &str, timeout: Duration) -> Self {
        Self { base: base_url.trim_end_matches('/').to_string(), http: client(timeout) }
    }

    fn url(&self, path: &str) -> String {
        format!("{}{path}", self.base)
    }

    fn finish<T: DeserializeOwned>(resp: reqwest::Result<reqwest::blocking::Response>) -> Result<T, ApiError> {
        let bytes = Self::check(resp)?;
        serde_json::from_slice(&bytes).map_err(|e| ApiError::Transport(format!("bad response body: {e}")))
    }

    fn check(resp: reqwest::Result<reqwest::blocking::Response>) -> Result<Vec<u8>, ApiError> {
        let resp = resp.map_err(|e| ApiError::Transport(e.to_string()))?;
        let status = resp.status();
        let bytes = resp.bytes().map_err(|e| ApiError::Transport(e.to_string()))?.to_vec();
        if status.is_success() {
            return Ok(bytes);
        }
        match serde_json::from_slice::<ErrorBody>(&bytes) {
            Ok(body) => match error_from_code(&body.error, &body.message) {
                Some(e) => Err(ApiError::Coordinator(e)),
                None => Err(ApiError::Transport(format!("{status}: {}", body.message))),
            },
            Err(_) => Err(ApiError::Transport(format!("{status}: {}", String::from_utf8_lossy(&bytes)))),
        }
    }

    fn post<B: Serialize, T: DeserializeOwned>(&self, path: &str, body: &B) -> Result<T, ApiError> {
        Self::finish(self.http.post(self.url(path)).json(body).send())
    }

    pub fn health(&self) -> Result<(), ApiError> {
        Self::check(self.http.get(self.url("/health")).send()).map(|_| ())
    }
}

impl CoordinatorApi for HttpCoordinator {
    fn issuer_key(&self) -> Result<IssuerPublicKey, ApiError> {
        let key: KeyResponse = Self::finish(self.http.get(self.url("/issuer-key")).send())?;
        IssuerPublicKey::from_base64(&key.public_key).map_err(|e| ApiError::Transport(e.to_string()))
    }

    fn register(&self, req: &RegisterRequest) -> Result<ChallengeSet, ApiError> {
        self.post("/proxies/register", req)
    }

    fn complete(&self, req: &CompleteRequest) -> Result<RegistrationOutcome, ApiError> {
        self.post("/proxies/complete", req)
    }

    fn auth_nonce(&self, pseudonym: &str) -> Result<NonceResponse, ApiError> {
        self.post("/auth/nonce", &NonceRequest { pseudonym: pseudonym.into() })
    }

    fn auth_token(&self, req: &AuthRequest) -> Result<TokenResponse, ApiError> {
        self.post("/auth/token", req)
    }

    fn list_proxies(&self) -> Result<Vec<ProxyListing>, ApiError> {
        Self::finish(self.http.get(self.url("/proxies")).send())
    }

    fn submit_query(&self, env: &QueryEnvelope) -> Result<QueryId, ApiError> {
        self.post::<_, SubmitResponse>("/queries", env).map(|r| r.query_id)
    }

    fn fetch_response(&self, id: &QueryId) -> Result<FetchResponse, ApiError> {
        Self::finish(self.http.get(self.url(&format!("/queries/{id}/response"))).send())
    }

    fn downvote(&self, id: &QueryId, req: &DownvoteRequest) -> Result<(), ApiError> {
        Self::check(self.http.post(self.url(&format!("/queries/{id}/downvote"))).json(req).send()).map(|_| ())
    }

    fn poll(&self, token: &str) -> Result<PollResponse, ApiError> {
        Self::finish(self.http.post(self.url("/proxy/poll")).bearer_auth(token).send())
    }

    fn respond(&self, token: &str, req: &RespondRequest) -> Result<(), ApiError> {
        Self::check(self.http.post(self.url("/proxy/respond")).bearer_auth(token).json(req).send()).map(|_| ())
    }

    fn audit_proof(&self, token: &str, req: &AuditProofRequest) -> Result<AuditProofResponse, ApiError> {
        Self::finish(self.http.post(self.url("/proxy/audit-proof")).bearer_auth(token).json(req).send())
    }
}

/// A notary reached over HTTP. Its public key is fetched once, at
/// construction.
pub struct HttpNotary {
    base: String,
    http: reqwest::blocking::Client,
    public: SigningPublicKey,
}

impl HttpNotary {
    pub fn connect(base_url: &str) -> Result<Self, ProvenanceError> {
        let base = base_url.trim_end_matches('/').to_string();
        let http = client(Duration::from_secs(60));
        let key: KeyResponse = http
            .get(format!("{base}/key"))
            .send()
            .and_then(|r| r.error_for_status())
            .and_then(|r| r.json())
            .map_err(|e| ProvenanceError::Unavailable(e.to_string()))?;
        let public = SigningPublicKey::from_base64(&key.public_key)
            .map_err(|e| ProvenanceError::Unavailable(format!("bad notary key: {e}")))?;
        Ok(Self { base, http, public })
    }
}

impl Notary for HttpNotary {
    fn notarize(&self, transcript: &SessionTranscript) -> Result<Notarization, ProvenanceError> {
        let resp = self
            .http
            .post(format!("{}/notarize", self.base))
            .json(transcript)
            .send()
            .map_err(|e| ProvenanceError::Unavailable(e.to_string()))?;
        let status = resp.status();
        if !status.is_success() {
            let msg = resp
                .json::<ErrorBody>()
                .map(|b| b.message)
                .unwrap_or_else(|_| status.to_string());
            return Err(ProvenanceError::Unavailable(msg));
        }
        resp.json().map_err(|e| ProvenanceError::Unavailable(e.to_string()))
    }

    fn public_key(&self) -> SigningPublicKey {
        self.public.clone()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn error_codes_round_trip() {
        use CoordinatorError::*;
        let all = [
            DuplicatePseudonym, BannedPseudonym, UnknownProxy, ProxyUnavailable, NotPending,
            DeadlineExceeded, NotActive, NonceInvalid, BadSignature, AuthExpired, AuthRejected,
            InvalidToken, DoubleSpend, Forbidden, NotFound, AlreadyVoted, NotAnswered,
            AlreadyAnswered, NoPendingAudit, InvalidRequest("bad field".into()), Store("disk full".into()),
        ];
        for e in all {
            let back = error_from_code(error_code(&e), &e.to_string());
            assert_eq!(back, Some(e));
        }
        assert_eq!(error_from_code("nonsense", ""), None);
    }
}
