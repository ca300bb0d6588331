//! The long-running proxy loop: keep a bearer token, poll, answer, prove.

use std::collections::VecDeque;
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{DriverWaits, Pause, ProxyCore, ProxyError};
use crate::api::{ApiError, CoordinatorApi};
use crate::chatbot::MockChatbotConfig;
use crate::clock::Clock;
use crate::coordinator::CoordinatorError;
use crate::protocol::{QueryEnvelope, TokenResponse};
use crate::provenance::AuditVerdict;
use crate::provenance::Notary;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AgentConfig {
    pub coordinator_url: String,
    pub notary_url: String,
    pub pseudonym: String,
    pub backend: String,
    /// PEM pair: agreement key, then signing key. Created if missing.
    pub identity_path: PathBuf,
    pub wallet_path: PathBuf,
    /// Most queries answered per rolling hour; unlimited when absent.
    pub hourly_limit: Option<u32>,
    pub poll_interval_ms: u64,
    /// Re-authenticate this long before the bearer token expires.
    pub token_refresh_margin_secs: u64,
    pub max_backoff_ms: u64,
    pub waits: DriverWaits,
    /// Settings for the bundled mock backend.
    pub chatbot: MockChatbotConfig,
}

impl Default for AgentConfig {
    fn default() -> Self {
        Self {
            coordinator_url: "http://127.0.0.1:8080".into(),
            notary_url: "http://127.0.0.1:8090".into(),
            pseudonym: String::new(),
            backend: crate::chatbot::MOCK_BACKEND_ID.into(),
            identity_path: "proxy-identity.pem".into(),
            wallet_path: "proxy-wallet.txt".into(),
            hourly_limit: None,
            poll_interval_ms: 2_000,
            token_refresh_margin_secs: 300,
            max_backoff_ms: 60_000,
            waits: DriverWaits::default(),
            chatbot: MockChatbotConfig::default(),
        }
    }
}

impl AgentConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.pseudonym.is_empty() || self.pseudonym.len() > 64 {
            return Err("pseudonym must be 1-64 bytes".into());
        }
        if self.hourly_limit == Some(0) {
            return Err("hourly_limit must be positive when set".into());
        }
        if self.backend != crate::chatbot::MOCK_BACKEND_ID {
            return Err(format!("backend {:?} is not supported; only {:?} is bundled", self.backend, crate::chatbot::MOCK_BACKEND_ID));
        }
        if self.waits.max_attempts == 0 {
            return Err("waits.max_attempts must be at least 1".into());
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum AgentError {
    #[error(transparent)]
    Api(#[from] ApiError),
    #[error(transparent)]
    Proxy(#[from] ProxyError),
    #[error("registration rejected: {0:?}")]
    RegistrationRejected(Vec<AuditVerdict>),
    #[error("this pseudonym has been removed from service")]
    Banned,
}

/// At most `limit` acquisitions in any rolling hour.
#[derive(Debug, Clone)]
pub struct HourlyLimiter {
    limit: Option<u32>,
    recent: VecDeque<u64>,
}

impl HourlyLimiter {
    const HOUR_MS: u64 = 3_600_000;

    pub fn new(limit: Option<u32>) -> Self {
        Self {
            limit,
            recent: VecDeque::new(),
        }
    }

    pub fn try_acquire(&mut self, now_ms: u64) -> bool {
        let Some(limit) = self.limit else { return true };
        while self.recent.front().is_some_and(|&t| now_ms.saturating_sub(t) >= Self::HOUR_MS) {
            self.recent.pop_front();
        }
        if self.recent.len() as u64 >= u64::from(limit) {
            return false;
        }
        self.recent.push_back(now_ms);
        true
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TickReport {
    pub received: usize,
    pub answered: usize,
    /// Envelopes held locally because of the hourly limit.
    pub deferred: usize,
    pub proofs_sent: usize,
    pub rewards: usize,
}

pub struct Agent {
    core: ProxyCore,
    api: Arc<dyn CoordinatorApi>,
    notary: Arc<dyn Notary>,
    clock: Arc<dyn Clock>,
    pause: Box<dyn Pause + Send>,
    limiter: HourlyLimiter,
    token: Option<TokenResponse>,
    local: VecDeque<QueryEnvelope>,
    wallet_path: Option<PathBuf>,
    refresh_margin_ms: u64,
}

fn is(e: &ApiError, want: CoordinatorError) -> bool {
    matches!(e, ApiError::Coordinator(c) if *c == want)
}

impl Agent {
    pub fn new(
        core: ProxyCore,
        api: Arc<dyn CoordinatorApi>,
        notary: Arc<dyn Notary>,
        clock: Arc<dyn Clock>,
        pause: Box<dyn Pause + Send>,
    ) -> Self {
        Self {
            core,
            api,
            notary,
            clock,
            pause,
            limiter: HourlyLimiter::new(None),
            token: None,
            local: VecDeque::new(),
            wallet_path: None,
            refresh_margin_ms: 300_000,
        }
    }

    pub fn with_limit(mut self, limit: Option<u32>) -> Self {
        self.limiter = HourlyLimiter::new(limit);
        self
    }

    pub fn with_wallet_path(mut self, path: PathBuf) -> Self {
        self.wallet_path = Some(path);
        self
    }

    pub fn with_refresh_margin_secs(mut self, secs: u64) -> Self {
        self.refresh_margin_ms = secs * 1000;
        self
    }

    pub fn core(&self) -> &ProxyCore {
        &self.core
    }

    pub fn queued(&self) -> usize {
        self.local.len()
    }

    /// Registers through the challenge flow unless the coordinator already
    /// knows this pseudonym as active.
    pub fn ensure_registered(&mut self) -> Result<(), AgentError> {
        match self.api.auth_nonce(self.core.pseudonym()) {
            Ok(_) => return Ok(()),
            Err(e) if is(&e, CoordinatorError::UnknownProxy) => {}
            Err(e) if is(&e, CoordinatorError::NotActive) => {}
            Err(e) => return Err(e.into()),
        }
        let set = match self.api.register(&self.core.register_request()) {
            Ok(set) => set,
            Err(e) if is(&e, CoordinatorError::BannedPseudonym) => return Err(AgentError::Banned),
            Err(e) => return Err(e.into()),
        };
        let complete = self.core.answer_challenges(&set, self.notary.as_ref(), self.pause.as_mut())?;
        let outcome = self.api.complete(&complete)?;
        if outcome.active {
            log::info!("registered as {}", self.core.pseudonym());
            Ok(())
        } else {
            Err(AgentError::RegistrationRejected(outcome.verdicts))
        }
    }

    fn token(&mut self) -> Result<String, AgentError> {
        let now = self.clock.now_ms();
        if let Some(t) = &self.token {
            if t.expires_at > now + self.refresh_margin_ms {
                return Ok(t.token.clone());
            }
        }
        let nonce = self.api.auth_nonce(self.core.pseudonym())?;
        let t = self.api.auth_token(&self.core.auth_request(&nonce.nonce))?;
        let token = t.token.clone();
        self.token = Some(t);
        Ok(token)
    }

    /// One poll-answer-prove cycle.
    pub fn tick(&mut self) -> Result<TickReport, AgentError> {
        let token = self.token()?;
        let mut report = TickReport::default();
        let poll = match self.api.poll(&token) {
            Ok(p) => p,
            Err(e) => {
                self.token = None;
                if is(&e, CoordinatorError::AuthRejected) && self.api.auth_nonce(self.core.pseudonym()).is_err() {
                    return Err(AgentError::Banned);
                }
                return Err(e.into());
            }
        };
        for id in &poll.proof_requests {
            let req = self.core.prove(id, self.notary.as_ref(), self.pause.as_mut())?;
            let resp = self.api.audit_proof(&token, &req)?;
            report.proofs_sent += 1;
            if self.core.accept_verdict(id, &resp)? {
                report.rewards += 1;
            } else {
                log::warn!("audit of {id} failed: {:?}", resp.verdict.reason);
            }
        }
        report.received = poll.queries.len();
        for env in poll.queries {
            if !self.local.iter().any(|q| q.query_id == env.query_id) {
                self.local.push_back(env);
            }
        }
        while !self.local.is_empty() {
            if !self.limiter.try_acquire(self.clock.now_ms()) {
                break;
            }
            let env = self.local.pop_front().expect("front exists");
            match self.core.handle_envelope(&env, self.pause.as_mut()) {
                Ok(h) => {
                    self.api.respond(&token, &h.respond)?;
                    report.answered += 1;
                }
                Err(e) => log::warn!("dropping {}: {e}", env.query_id),
            }
        }
        report.deferred = self.local.len();
        if report.rewards > 0 {
            if let Some(path) = &self.wallet_path {
                self.core.wallet().save(path).map_err(ProxyError::from)?;
            }
        }
        Ok(report)
    }

    /// Ticks until `stop` is set, backing off exponentially after failures.
    pub fn run(&mut self, stop: &AtomicBool, poll_interval_ms: u64, max_backoff_ms: u64) -> Result<(), AgentError> {
        let mut backoff = 1_000u64;
        while !stop.load(Ordering::Relaxed) {
            match self.tick() {
                Ok(r) => {
                    backoff = 1_000;
                    if r.answered + r.proofs_sent > 0 {
                        log::info!("{r:?}");
                    }
                    std::thread::sleep(Duration::from_millis(poll_interval_ms));
                }
                Err(AgentError::Banned) => return Err(AgentError::Banned),
                Err(e) => {
                    log::warn!("tick failed: {e}; retrying in {backoff} ms");
                    std::thread::sleep(Duration::from_millis(backoff));
                    backoff = (backoff * 2).min(max_backoff_ms.max(1_000));
                }
            }
        }
        Ok(())
    }
}
