use std::collections::BTreeMap;
use std::path::Path;

use crate::crypto::{ecash_unblind, ecash_verify, BlindingSecret, CryptoError, ECashToken, IssuerPublicKey};
use crate::protocol::QueryId;

/// Earned e-cash plus blinding secrets waiting for the issuer's signature.
#[derive(Debug, Default)]
pub struct Wallet {
    tokens: Vec<ECashToken>,
    pending: BTreeMap<QueryId, BlindingSecret>,
}

#[derive(Debug, thiserror::Error)]
pub enum WalletError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: {source}")]
    Parse { line: usize, source: CryptoError },
    #[error("token does not verify under the issuer key")]
    Invalid,
    #[error("no blinding secret for {0}")]
    NoPending(QueryId),
    #[error(transparent)]
    Crypto(#[from] CryptoError),
}

impl Wallet {
    /// One base64 token per line; blank lines ignored.
    pub fn load(path: &Path, issuer: &IssuerPublicKey) -> Result<Self, WalletError> {
        let mut w = Wallet::default();
        if !path.exists() {
            return Ok(w);
        }
        for (i, line) in std::fs::read_to_string(path)?.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let token = ECashToken::from_base64(line).map_err(|source| WalletError::Parse { line: i + 1, source })?;
            w.add(token, issuer)?;
        }
        Ok(w)
    }

    pub fn save(&self, path: &Path) -> Result<(), WalletError> {
        let mut text = String::new();
        for t in &self.tokens {
            text.push_str(&t.to_base64());
            text.push('\n');
        }
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, text)?;
        std::fs::rename(tmp, path)?;
        Ok(())
    }

    pub fn add(&mut self, token: ECashToken, issuer: &IssuerPublicKey) -> Result<(), WalletError> {
        if !ecash_verify(&token, issuer) {
            return Err(WalletError::Invalid);
        }
        self.tokens.push(token);
        Ok(())
    }

    pub fn take(&mut self) -> Option<ECashToken> {
        self.tokens.pop()
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[ECashToken] {
        &self.tokens
    }

    pub fn hold_pending(&mut self, id: QueryId, secret: BlindingSecret) {
        self.pending.insert(id, secret);
    }

    pub fn pending_len(&self) -> usize {
        self.pending.len()
    }

    pub fn pending_for(&self, id: &QueryId) -> Option<&BlindingSecret> {
        self.pending.get(id)
    }

    /// Forgets the blinding secret of a proof that was not rewarded.
    pub fn drop_pending(&mut self, id: &QueryId) {
        self.pending.remove(id);
    }

    pub fn redeem(&mut self, id: &QueryId, blinded_sig: &[u8], issuer: &IssuerPublicKey) -> Result<(), WalletError> {
        let secret = self.pending.remove(id).ok_or(WalletError::NoPending(*id))?;
        let token = ecash_unblind(blinded_sig, &secret, issuer)?;
        self.add(token, issuer)
    }
}
