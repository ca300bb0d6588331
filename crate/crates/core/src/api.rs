//! The coordinator's API as seen by proxies and users, independent of
//! whether it is reached in-process or over HTTP.

use thiserror::Error;

use crate::coordinator::{Coordinator, CoordinatorError};
use crate::crypto::IssuerPublicKey;
use crate::protocol::{
    AuditProofRequest, AuditProofResponse, AuthRequest, ChallengeSet, CompleteRequest, DownvoteRequest,
    FetchResponse, NonceResponse, PollResponse, ProxyListing, QueryEnvelope, QueryId, RegisterRequest,
    RegistrationOutcome, RespondRequest, TokenResponse,
};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ApiError {
    #[error(transparent)]
    Coordinator(#[from] CoordinatorError),
    #[error("transport: {0}")]
    Transport(String),
}

pub trait CoordinatorApi: Send + Sync {
    fn issuer_key(&self) -> Result<IssuerPublicKey, ApiError>;
    fn register(&self, req: &RegisterRequest) -> Result<ChallengeSet, ApiError>;
    fn complete(&self, req: &CompleteRequest) -> Result<RegistrationOutcome, ApiError>;
    fn auth_nonce(&self, pseudonym: &str) -> Result<NonceResponse, ApiError>;
    fn auth_token(&self, req: &AuthRequest) -> Result<TokenResponse, ApiError>;
    fn list_proxies(&self) -> Result<Vec<ProxyListing>, ApiError>;
    fn submit_query(&self, env: &QueryEnvelope) -> Result<QueryId, ApiError>;
    fn fetch_response(&self, id: &QueryId) -> Result<FetchResponse, ApiError>;
    fn downvote(&self, id: &QueryId, req: &DownvoteRequest) -> Result<(), ApiError>;
    fn poll(&self, token: &str) -> Result<PollResponse, ApiError>;
    fn respond(&self, token: &str, req: &RespondRequest) -> Result<(), ApiError>;
    fn audit_proof(&self, token: &str, req: &AuditProofRequest) -> Result<AuditProofResponse, ApiError>;
}

impl CoordinatorApi for Coordinator {
    fn issuer_key(&self) -> Result<IssuerPublicKey, ApiError> {
        Ok(self.issuer_public_key().clone())
    }

    fn register(&self, req: &RegisterRequest) -> Result<ChallengeSet, ApiError> {
        Ok(self.register_proxy(req)?)
    }

    fn complete(&self, req: &CompleteRequest) -> Result<RegistrationOutcome, ApiError> {
        Ok(self.complete_registration(req)?)
    }

    fn auth_nonce(&self, pseudonym: &str) -> Result<NonceResponse, ApiError> {
        Ok(self.issue_auth_nonce(pseudonym)?)
    }

    fn auth_token(&self, req: &AuthRequest) -> Result<TokenResponse, ApiError> {
        Ok(self.authenticate(req)?)
    }

    fn list_proxies(&self) -> Result<Vec<ProxyListing>, ApiError> {
        Ok(Coordinator::list_proxies(self))
    }

    fn submit_query(&self, env: &QueryEnvelope) -> Result<QueryId, ApiError> {
        Ok(Coordinator::submit_query(self, env)?)
    }

    fn fetch_response(&self, id: &QueryId) -> Result<FetchResponse, ApiError> {
        Ok(Coordinator::fetch_response(self, id)?)
    }

    fn downvote(&self, id: &QueryId, req: &DownvoteRequest) -> Result<(), ApiError> {
        Ok(Coordinator::downvote(self, id, req)?)
    }

    fn poll(&self, token: &str) -> Result<PollResponse, ApiError> {
        Ok(self.poll_queries(token)?)
    }

    fn respond(&self, token: &str, req: &RespondRequest) -> Result<(), ApiError> {
        Ok(self.submit_response(token, req)?)
    }

    fn audit_proof(&self, token: &str, req: &AuditProofRequest) -> Result<AuditProofResponse, ApiError> {
        Ok(self.verify_audit(token, req)?)
    }
}
