//! Cryptographic primitives: P-256 identities, AES-256-GCM sealing, ECDSA
//! signatures and the RSA blind-signature e-cash scheme.
//!
//! Everything here is either pure or takes its randomness explicitly, so the
//! same code drives both the live services and the seeded simulator.

mod aead;
mod ecash;
mod keys;

pub use aead::{open, seal, SealedBox, SymmetricKey};
pub use ecash::{
    ecash_blind, ecash_sign_blinded, ecash_unblind, ecash_verify, BlindingSecret, ECashToken,
    IssuerKey, IssuerPublicKey, DEFAULT_MODULUS_BITS, ECASH_MESSAGE_LEN,
};
pub use keys::{
    derive_shared_key, generate_identity, sign, verify_signature, AgreementPublicKey,
    AgreementSecret, IdentityKeys, PublicBundle, Signature, SigningPublicKey, SigningSecret,
};

use thiserror::Error;

use crate::wire::WireError;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum CryptoError {
    #[error("invalid public key")]
    InvalidPublicKey,
    #[error("invalid private key")]
    InvalidPrivateKey,
    #[error("authentication failed")]
    AuthFailure,
    #[error("malformed blinded message")]
    MalformedBlinded,
    #[error("unblinded signature does not verify")]
    InvalidBlindSignature,
    #[error("message is not invertible modulo the issuer modulus")]
    NotInvertible,
    #[error("rsa: {0}")]
    Rsa(String),
    #[error(transparent)]
    Wire(#[from] WireError),
}

/// Cryptographically secure randomness, as accepted by every operation here.
pub trait SecureRng: rand::RngCore + rand::CryptoRng {}
impl<T: rand::RngCore + rand::CryptoRng> SecureRng for T {}
