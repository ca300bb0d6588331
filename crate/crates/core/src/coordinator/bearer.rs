//! Compact ES256 bearer tokens in the familiar `header.claims.signature`
//! layout (base64url, no padding).

use base64::engine::general_purpose::URL_SAFE_NO_PAD;
use base64::Engine;
use serde::{Deserialize, Serialize};

use crate::crypto::{sign, verify_signature, SigningPublicKey, SigningSecret};

const HEADER: &str = r#"{"alg":"ES256","typ":"JWT"}"#;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BearerClaims {
    pub sub: String,
    pub iat: u64,
    pub exp: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, thiserror::Error)]
pub enum BearerError {
    #[error("malformed bearer token")]
    Malformed,
    #[error("bearer token signature invalid")]
    BadSignature,
}

pub fn issue(claims: &BearerClaims, key: &SigningSecret) -> String {
    let head = URL_SAFE_NO_PAD.encode(HEADER);
    let body = URL_SAFE_NO_PAD.encode(serde_json::to_vec(claims).expect("claims serialize"));
    let signing_input = format!("{head}.{body}");
    let sig = sign(signing_input.as_bytes(), key);
    format!("{signing_input}.{}", URL_SAFE_NO_PAD.encode(sig.0))
}

/// Checks structure and signature only; expiry is the caller's business.
pub fn verify(token: &str, key: &SigningPublicKey) -> Result<BearerClaims, BearerError> {
    let mut parts = token.split('.');
    let (Some(head), Some(body), Some(sig), None) = (parts.next(), parts.next(), parts.next(), parts.next()) else {
        return Err(BearerError::Malformed);
    };
    let header = URL_SAFE_NO_PAD.decode(head).map_err(|_| BearerError::Malformed)?;
    if header != HEADER.as_bytes() {
        return Err(BearerError::Malformed);
    }
    let sig = URL_SAFE_NO_PAD.decode(sig).map_err(|_| BearerError::Malformed)?;
    let signing_input = &token[..head.len() + 1 + body.len()];
    if !verify_signature(signing_input.as_bytes(), &sig, key) {
        return Err(BearerError::BadSignature);
    }
    let claims = URL_SAFE_NO_PAD.decode(body).map_err(|_| BearerError::Malformed)?;
    serde_json::from_slice(&claims).map_err(|_| BearerError::Malformed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    #[test]
    fn issue_verify_and_tamper() {
        let mut rng = ChaCha20Rng::seed_from_u64(4);
        let key = SigningSecret::generate(&mut rng);
        let claims = BearerClaims {
            sub: "p1".into(),
            iat: 10,
            exp: 20,
        };
        let t = issue(&claims, &key);
        assert_eq!(verify(&t, &key.public_key()).unwrap(), claims);

        let other = SigningSecret::generate(&mut rng);
        assert_eq!(verify(&t, &other.public_key()), Err(BearerError::BadSignature));

        let forged_body = URL_SAFE_NO_PAD.encode(br#"{"sub":"p2","iat":10,"exp":99}"#);
        let mut parts: Vec<&str> = t.split('.').collect();
        parts[1] = &forged_body;
        assert_eq!(verify(&parts.join("."), &key.public_key()), Err(BearerError::BadSignature));
        assert_eq!(verify("a.b", &key.public_key()), Err(BearerError::Malformed));
    }
}
