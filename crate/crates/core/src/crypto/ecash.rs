//! Chaumian e-cash over RSA blind signatures.
//!
//! The flow is RSABSSA with SHA-384, EMSA-PSS encoding and a zero-length salt
//! (the deterministic variant): a token message always encodes to the same
//! padded representative, so a token is `(message, signature)` and nothing
//! else.

use std::fmt;

use num_bigint_dig::{BigUint, ModInverse, RandBigInt};
use num_traits::{One, Zero};
use rsa::pkcs8::{DecodePrivateKey, DecodePublicKey, EncodePrivateKey, EncodePublicKey, LineEnding};
use rsa::traits::PublicKeyParts;
use rsa::{RsaPrivateKey, RsaPublicKey};
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use sha2::{Digest, Sha384};

use super::{CryptoError, SecureRng};
use crate::wire::{b64_decode, b64_encode, Reader, Writer};

/// Every token message is this many random bytes.
pub const ECASH_MESSAGE_LEN: usize = 32;

pub const DEFAULT_MODULUS_BITS: usize = 2048;

const HASH_LEN: usize = 48;

/// The coordinator's minting key.
#[derive(Clone)]
pub struct IssuerKey {
    private: RsaPrivateKey,
}

#[derive(Clone, PartialEq, Eq)]
pub struct IssuerPublicKey {
    public: RsaPublicKey,
}

/// A spendable coin.
#[derive(Clone, PartialEq, Eq, Hash)]
pub struct ECashToken {
    pub message: [u8; ECASH_MESSAGE_LEN],
    pub signature: Vec<u8>,
}

/// What the requester keeps between blinding and unblinding.
#[derive(Clone, PartialEq, Eq)]
pub struct BlindingSecret {
    pub blinding_factor: Vec<u8>,
    pub message: [u8; ECASH_MESSAGE_LEN],
}

impl IssuerKey {
    pub fn generate(rng: &mut impl SecureRng, bits: usize) -> Result<Self, CryptoError> {
        let private = RsaPrivateKey::new(rng, bits).map_err(|e| CryptoError::Rsa(e.to_string()))?;
        Ok(Self { private })
    }

    pub fn public_key(&self) -> IssuerPublicKey {
        IssuerPublicKey {
            public: self.private.to_public_key(),
        }
    }

    pub fn to_pem(&self) -> String {
        self.private
            .to_pkcs8_pem(LineEnding::LF)
            .expect("encode rsa key")
            .to_string()
    }

    pub fn from_pem(pem: &str) -> Result<Self, CryptoError> {
        RsaPrivateKey::from_pkcs8_pem(pem)
            .map(|private| Self { private })
            .map_err(|_| CryptoError::InvalidPrivateKey)
    }

    /// Signs a message directly, without blinding. Used for coins the issuer
    /// mints for itself (bootstrap and audit payments).
    pub fn mint(&self, rng: &mut impl SecureRng) -> ECashToken {
        let mut message = [0u8; ECASH_MESSAGE_LEN];
        rng.fill_bytes(&mut message);
        let pk = self.public_key();
        let encoded = emsa_pss_encode(&message, pk.modulus_bits() - 1);
        let m = BigUint::from_bytes_be(&encoded);
        let s = rsa::hazmat::rsa_decrypt_and_check(&self.private, None::<&mut rand::rngs::OsRng>, &m)
            .expect("encoded message below modulus");
        ECashToken {
            message,
            signature: i2osp(&s, pk.modulus_len()),
        }
    }
}

impl fmt::Debug for IssuerKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("IssuerKey(..)")
    }
}

impl IssuerPublicKey {
    pub fn modulus_len(&self) -> usize {
        self.public.size()
    }

    fn modulus_bits(&self) -> usize {
        self.public.n().bits()
    }

    pub fn to_der(&self) -> Vec<u8> {
        self.public.to_public_key_der().expect("encode spki").into_vec()
    }

    pub fn from_der(der: &[u8]) -> Result<Self, CryptoError> {
        RsaPublicKey::from_public_key_der(der)
            .map(|public| Self { public })
            .map_err(|_| CryptoError::InvalidPublicKey)
    }

    pub fn to_base64(&self) -> String {
        b64_encode(&self.to_der())
    }

    pub fn from_base64(text: &str) -> Result<Self, CryptoError> {
        Self::from_der(&b64_decode(text)?)
    }
}

impl fmt::Debug for IssuerPublicKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "IssuerPublicKey({} bits)", self.modulus_bits())
    }
}

impl Serialize for IssuerPublicKey {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_base64())
    }
}

impl<'de> Deserialize<'de> for IssuerPublicKey {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let text = String::deserialize(d)?;
        Self::from_base64(&text).map_err(serde::de::Error::custom)
    }
}

impl ECashToken {
    pub fn to_bytes(&self) -> Vec<u8> {
        Writer::new().field(&self.message).field(&self.signature).finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CryptoError> {
        let mut r = Reader::new(bytes);
        let message = r.fixed::<ECASH_MESSAGE_LEN>("message")?;
        let signature = r.field()?.to_vec();
        r.finish()?;
        Ok(Self { message, signature })
    }

    pub fn to_base64(&self) -> String {
        b64_encode(&self.to_bytes())
    }

    pub fn from_base64(text: &str) -> Result<Self, CryptoError> {
        Self::from_bytes(&b64_decode(text)?)
    }
}

impl fmt::Debug for ECashToken {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "ECashToken({})", &b64_encode(&self.message)[..8])
    }
}

impl Serialize for ECashToken {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_base64())
    }
}

impl<'de> Deserialize<'de> for ECashToken {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let text = String::deserialize(d)?;
        Self::from_base64(&text).map_err(serde::de::Error::custom)
    }
}

impl fmt::Debug for BlindingSecret {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("BlindingSecret(..)")
    }
}

impl BlindingSecret {
    pub fn to_bytes(&self) -> Vec<u8> {
        Writer::new().field(&self.blinding_factor).field(&self.message).finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CryptoError> {
        let mut r = Reader::new(bytes);
        let blinding_factor = r.field()?.to_vec();
        let message = r.fixed::<ECASH_MESSAGE_LEN>("message")?;
        r.finish()?;
        Ok(Self { blinding_factor, message })
    }
}

/// Blinds `message` for signing. The returned secret holds the inverse of the
/// blinding factor, which is all that unblinding needs.
pub fn ecash_blind(
    message: &[u8; ECASH_MESSAGE_LEN],
    issuer: &IssuerPublicKey,
    rng: &mut impl SecureRng,
) -> Result<(Vec<u8>, BlindingSecret), CryptoError> {
    let n = issuer.public.n();
    let encoded = emsa_pss_encode(message, issuer.modulus_bits() - 1);
    let m = BigUint::from_bytes_be(&encoded);
    if gcd_is_not_one(&m, n) {
        return Err(CryptoError::NotInvertible);
    }
    let (r, r_inv) = loop {
        let r = rng.gen_biguint_below(n);
        if r.is_zero() {
            continue;
        }
        if let Some(inv) = (&r).mod_inverse(n).and_then(|i| i.to_biguint()) {
            break (r, inv);
        }
    };
    let x = r.modpow(issuer.public.e(), n);
    let z = (m * x) % n;
    Ok((
        i2osp(&z, issuer.modulus_len()),
        BlindingSecret {
            blinding_factor: i2osp(&r_inv, issuer.modulus_len()),
            message: *message,
        },
    ))
}

/// Raw RSA signature over a blinded representative, checked before release.
pub fn ecash_sign_blinded(blinded: &[u8], issuer: &IssuerKey) -> Result<Vec<u8>, CryptoError> {
    let k = issuer.private.size();
    if blinded.len() != k {
        return Err(CryptoError::MalformedBlinded);
    }
    let m = BigUint::from_bytes_be(blinded);
    if &m >= issuer.private.n() {
        return Err(CryptoError::MalformedBlinded);
    }
    let s = rsa::hazmat::rsa_decrypt_and_check(&issuer.private, None::<&mut rand::rngs::OsRng>, &m)
        .map_err(|e| CryptoError::Rsa(e.to_string()))?;
    Ok(i2osp(&s, k))
}

pub fn ecash_unblind(
    blinded_signature: &[u8],
    secret: &BlindingSecret,
    issuer: &IssuerPublicKey,
) -> Result<ECashToken, CryptoError> {
    let n = issuer.public.n();
    let k = issuer.modulus_len();
    if blinded_signature.len() != k {
        return Err(CryptoError::InvalidBlindSignature);
    }
    let z = BigUint::from_bytes_be(blinded_signature);
    let inv = BigUint::from_bytes_be(&secret.blinding_factor);
    if &z >= n || &inv >= n {
        return Err(CryptoError::InvalidBlindSignature);
    }
    let s = (z * inv) % n;
    let token = ECashToken {
        message: secret.message,
        signature: i2osp(&s, k),
    };
    if !ecash_verify(&token, issuer) {
        return Err(CryptoError::InvalidBlindSignature);
    }
    Ok(token)
}

pub fn ecash_verify(token: &ECashToken, issuer: &IssuerPublicKey) -> bool {
    let n = issuer.public.n();
    if token.signature.len() != issuer.modulus_len() {
        return false;
    }
    let s = BigUint::from_bytes_be(&token.signature);
    if &s >= n {
        return false;
    }
    let m = s.modpow(issuer.public.e(), n);
    let em_bits = issuer.modulus_bits() - 1;
    let em_len = em_bits.div_ceil(8);
    let recovered = i2osp(&m, em_len);
    // zero-length salt makes the encoding deterministic
    recovered == emsa_pss_encode(&token.message, em_bits)
}

fn gcd_is_not_one(a: &BigUint, b: &BigUint) -> bool {
    let (mut x, mut y) = (a.clone(), b.clone());
    while !y.is_zero() {
        let r = &x % &y;
        x = y;
        y = r;
    }
    !x.is_one()
}

fn i2osp(v: &BigUint, len: usize) -> Vec<u8> {
    let bytes = v.to_bytes_be();
    assert!(bytes.len() <= len, "integer too large for {len} bytes");
    let mut out = vec![0u8; len - bytes.len()];
    out.extend_from_slice(&bytes);
    out
}

fn mgf1(seed: &[u8], len: usize) -> Vec<u8> {
    let mut out = Vec::with_capacity(len + HASH_LEN);
    let mut counter = 0u32;
    while out.len() < len {
        let mut h = Sha384::new();
        h.update(seed);
        h.update(counter.to_be_bytes());
        out.extend_from_slice(&h.finalize());
        counter += 1;
    }
    out.truncate(len);
    out
}

/// EMSA-PSS-ENCODE with SHA-384, MGF1-SHA-384 and an empty salt.
fn emsa_pss_encode(message: &[u8], em_bits: usize) -> Vec<u8> {
    let em_len = em_bits.div_ceil(8);
    let m_hash = Sha384::digest(message);
    let mut h = Sha384::new();
    h.update([0u8; 8]);
    h.update(m_hash);
    let h = h.finalize();
    let db_len = em_len - HASH_LEN - 1;
    let mut db = vec![0u8; db_len];
    db[db_len - 1] = 0x01;
    let mask = mgf1(&h, db_len);
    for (d, m) in db.iter_mut().zip(mask) {
        *d ^= m;
    }
    let unused = 8 * em_len - em_bits;
    db[0] &= 0xffu8 >> unused;
    let mut em = db;
    em.extend_from_slice(&h);
    em.push(0xbc);
    em
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use rand::{RngCore, SeedableRng};
    use rand_chacha::ChaCha20Rng;
    use std::sync::OnceLock;

    pub(crate) fn issuer() -> &'static IssuerKey {
        static KEY: OnceLock<IssuerKey> = OnceLock::new();
        KEY.get_or_init(|| IssuerKey::generate(&mut ChaCha20Rng::seed_from_u64(99), 2048).unwrap())
    }

    fn msg(rng: &mut ChaCha20Rng) -> [u8; 32] {
        let mut m = [0u8; 32];
        rng.fill_bytes(&mut m);
        m
    }

    #[test]
    fn full_chain() {
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        let pk = issuer().public_key();
        let m = msg(&mut rng);
        let (blinded, secret) = ecash_blind(&m, &pk, &mut rng).unwrap();
        assert_eq!(blinded.len(), pk.modulus_len());
        let bsig = ecash_sign_blinded(&blinded, issuer()).unwrap();
        assert_eq!(bsig, ecash_sign_blinded(&blinded, issuer()).unwrap());
        let token = ecash_unblind(&bsig, &secret, &pk).unwrap();
        assert_eq!(token.message, m);
        assert_ne!(token.signature, bsig);
        assert!(ecash_verify(&token, &pk));
    }

    #[test]
    fn blinding_is_randomized() {
        let mut rng = ChaCha20Rng::seed_from_u64(2);
        let pk = issuer().public_key();
        let m = msg(&mut rng);
        let (b1, _) = ecash_blind(&m, &pk, &mut rng).unwrap();
        let (b2, _) = ecash_blind(&m, &pk, &mut rng).unwrap();
        assert_ne!(b1, b2);
    }

    #[test]
    fn wrong_secret_or_garbage_fails() {
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        let pk = issuer().public_key();
        let m = msg(&mut rng);
        let (blinded, secret) = ecash_blind(&m, &pk, &mut rng).unwrap();
        let (_, other) = ecash_blind(&m, &pk, &mut rng).unwrap();
        let bsig = ecash_sign_blinded(&blinded, issuer()).unwrap();
        assert_eq!(ecash_unblind(&bsig, &other, &pk), Err(CryptoError::InvalidBlindSignature));

        let mut garbage = vec![0x11u8; pk.modulus_len()];
        garbage[0] = 0x01;
        let gsig = ecash_sign_blinded(&garbage, issuer()).unwrap();
        assert_eq!(ecash_unblind(&gsig, &secret, &pk), Err(CryptoError::InvalidBlindSignature));
    }

    #[test]
    fn malformed_blinded_rejected() {
        assert_eq!(ecash_sign_blinded(&[1, 2, 3], issuer()), Err(CryptoError::MalformedBlinded));
        let too_big = vec![0xffu8; issuer().public_key().modulus_len()];
        assert_eq!(ecash_sign_blinded(&too_big, issuer()), Err(CryptoError::MalformedBlinded));
    }

    #[test]
    fn verify_rejects_mutation_and_foreign_issuer() {
        let mut rng = ChaCha20Rng::seed_from_u64(4);
        let pk = issuer().public_key();
        let token = issuer().mint(&mut rng);
        assert!(ecash_verify(&token, &pk));
        let mut mutated = token.clone();
        mutated.message[0] ^= 1;
        assert!(!ecash_verify(&mutated, &pk));
        let other = IssuerKey::generate(&mut rng, 1024).unwrap();
        assert!(!ecash_verify(&token, &other.public_key()));
        assert_eq!(ECashToken::from_base64(&token.to_base64()).unwrap(), token);
    }

    #[test]
    fn issuer_view_is_unlinkable_surrogate() {
        let mut rng = ChaCha20Rng::seed_from_u64(5);
        let pk = issuer().public_key();
        let m = msg(&mut rng);
        let mut seen = std::collections::HashSet::new();
        let mut tokens = std::collections::HashSet::new();
        for _ in 0..1000 {
            let (blinded, secret) = ecash_blind(&m, &pk, &mut rng).unwrap();
            assert!(seen.insert(blinded.clone()));
            let bsig = ecash_sign_blinded(&blinded, issuer()).unwrap();
            let token = ecash_unblind(&bsig, &secret, &pk).unwrap();
            assert!(!seen.contains(&token.signature) && token.signature != bsig);
            tokens.insert(token);
        }
        assert_eq!(tokens.len(), 1);
    }

    #[test]
    fn pem_round_trip() {
        let pem = issuer().to_pem();
        let back = IssuerKey::from_pem(&pem).unwrap();
        assert_eq!(back.public_key(), issuer().public_key());
        let pk = IssuerPublicKey::from_base64(&issuer().public_key().to_base64()).unwrap();
        assert_eq!(pk, issuer().public_key());
    }
}
