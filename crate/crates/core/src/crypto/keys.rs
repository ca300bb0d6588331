use std::fmt;

use hkdf::Hkdf;
use p256::ecdsa::signature::{Signer, Verifier};
use p256::ecdsa::{SigningKey, VerifyingKey};
use p256::pkcs8::{DecodePrivateKey, DecodePublicKey, EncodePrivateKey, EncodePublicKey, LineEnding};
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use sha2::Sha256;

use super::{CryptoError, SecureRng, SymmetricKey};
use crate::wire::{b64_decode, b64_encode, concat_fields, Reader};

const KDF_INFO: &[u8] = b"veil/e2ee/aes-256-gcm/v1";

/// Public half of an ECDH P-256 pair, carried as base64 SPKI.
#[derive(Clone, PartialEq, Eq)]
pub struct AgreementPublicKey(p256::PublicKey);

/// Public half of an ECDSA P-256 pair, carried as base64 SPKI.
#[derive(Clone, PartialEq, Eq)]
pub struct SigningPublicKey(VerifyingKey);

#[derive(Clone)]
pub struct AgreementSecret(p256::SecretKey);

#[derive(Clone)]
pub struct SigningSecret(SigningKey);

/// Fixed-width `r || s` ECDSA signature.
#[derive(Clone, Copy, PartialEq, Eq)]
pub struct Signature(pub [u8; 64]);

/// A participant's long-term (or per-query ephemeral) key material.
#[derive(Clone)]
pub struct IdentityKeys {
    agreement: AgreementSecret,
    signing: SigningSecret,
}

/// Both public halves of an [`IdentityKeys`].
#[derive(Clone, PartialEq, Eq, Debug)]
pub struct PublicBundle {
    pub agreement: AgreementPublicKey,
    pub signing: SigningPublicKey,
}

pub fn generate_identity(rng: &mut impl SecureRng) -> IdentityKeys {
    IdentityKeys {
        agreement: AgreementSecret(p256::SecretKey::random(&mut *rng)),
        signing: SigningSecret(SigningKey::random(rng)),
    }
}

impl IdentityKeys {
    pub fn agreement(&self) -> &AgreementSecret {
        &self.agreement
    }

    pub fn signing(&self) -> &SigningSecret {
        &self.signing
    }

    pub fn public_bundle(&self) -> PublicBundle {
        PublicBundle {
            agreement: self.agreement.public_key(),
            signing: self.signing.public_key(),
        }
    }

    pub fn sign(&self, message: &[u8]) -> Signature {
        sign(message, &self.signing)
    }

    /// PKCS#8 PEM of both private halves, for local key files only.
    pub fn to_pem_pair(&self) -> (String, String) {
        let a = self
            .agreement
            .0
            .to_pkcs8_pem(LineEnding::LF)
            .expect("encode p256 key")
            .to_string();
        let s = self
            .signing
            .0
            .to_pkcs8_pem(LineEnding::LF)
            .expect("encode p256 key")
            .to_string();
        (a, s)
    }

    pub fn from_pem_pair(agreement: &str, signing: &str) -> Result<Self, CryptoError> {
        Ok(Self {
            agreement: AgreementSecret(
                p256::SecretKey::from_pkcs8_pem(agreement).map_err(|_| CryptoError::InvalidPrivateKey)?,
            ),
            signing: SigningSecret(
                SigningKey::from_pkcs8_pem(signing).map_err(|_| CryptoError::InvalidPrivateKey)?,
            ),
        })
    }

    /// Both PEM blocks in one text: agreement key first.
    pub fn to_pem(&self) -> String {
        let (a, s) = self.to_pem_pair();
        a + &s
    }

    pub fn from_pem(text: &str) -> Result<Self, CryptoError> {
        const BEGIN: &str = "-----BEGIN";
        let second = text
            .match_indices(BEGIN)
            .nth(1)
            .map(|(i, _)| i)
            .ok_or(CryptoError::InvalidPrivateKey)?;
        Self::from_pem_pair(&text[..second], &text[second..])
    }
}

impl fmt::Debug for IdentityKeys {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("IdentityKeys")
            .field("public", &self.public_bundle())
            .finish_non_exhaustive()
    }
}

impl AgreementSecret {
    pub fn generate(rng: &mut impl SecureRng) -> Self {
        Self(p256::SecretKey::random(rng))
    }

    pub fn public_key(&self) -> AgreementPublicKey {
        AgreementPublicKey(self.0.public_key())
    }

    pub fn to_pem(&self) -> String {
        self.0
            .to_pkcs8_pem(LineEnding::LF)
            .expect("encode p256 key")
            .to_string()
    }

    pub fn from_pem(pem: &str) -> Result<Self, CryptoError> {
        p256::SecretKey::from_pkcs8_pem(pem)
            .map(Self)
            .map_err(|_| CryptoError::InvalidPrivateKey)
    }
}

impl SigningSecret {
    pub fn generate(rng: &mut impl SecureRng) -> Self {
        Self(SigningKey::random(rng))
    }

    pub fn public_key(&self) -> SigningPublicKey {
        SigningPublicKey(*self.0.verifying_key())
    }

    pub fn to_pem(&self) -> String {
        self.0
            .to_pkcs8_pem(LineEnding::LF)
            .expect("encode p256 key")
            .to_string()
    }

    pub fn from_pem(pem: &str) -> Result<Self, CryptoError> {
        SigningKey::from_pkcs8_pem(pem)
            .map(Self)
            .map_err(|_| CryptoError::InvalidPrivateKey)
    }
}

impl AgreementPublicKey {
    pub fn to_der(&self) -> Vec<u8> {
        self.0.to_public_key_der().expect("encode spki").into_vec()
    }

    pub fn from_der(der: &[u8]) -> Result<Self, CryptoError> {
        p256::PublicKey::from_public_key_der(der)
            .map(Self)
            .map_err(|_| CryptoError::InvalidPublicKey)
    }

    pub fn to_base64(&self) -> String {
        b64_encode(&self.to_der())
    }

    pub fn from_base64(text: &str) -> Result<Self, CryptoError> {
        Self::from_der(&b64_decode(text)?)
    }
}

impl SigningPublicKey {
    pub fn to_der(&self) -> Vec<u8> {
        self.0.to_public_key_der().expect("encode spki").into_vec()
    }

    pub fn from_der(der: &[u8]) -> Result<Self, CryptoError> {
        VerifyingKey::from_public_key_der(der)
            .map(Self)
            .map_err(|_| CryptoError::InvalidPublicKey)
    }

    pub fn to_base64(&self) -> String {
        b64_encode(&self.to_der())
    }

    pub fn from_base64(text: &str) -> Result<Self, CryptoError> {
        Self::from_der(&b64_decode(text)?)
    }
}

macro_rules! b64_debug_serde {
    ($t:ty) => {
        impl fmt::Debug for $t {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                write!(f, "{}({})", stringify!($t), self.to_base64())
            }
        }

        impl Serialize for $t {
            fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
                s.serialize_str(&self.to_base64())
            }
        }

        impl<'de> Deserialize<'de> for $t {
            fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
                let text = String::deserialize(d)?;
                Self::from_base64(&text).map_err(serde::de::Error::custom)
            }
        }
    };
}

b64_debug_serde!(AgreementPublicKey);
b64_debug_serde!(SigningPublicKey);
b64_debug_serde!(Signature);

impl PublicBundle {
    /// base64 of the length-prefixed pair of SPKI encodings.
    pub fn encode(&self) -> String {
        b64_encode(&concat_fields(&[&self.agreement.to_der(), &self.signing.to_der()]))
    }

    pub fn decode(text: &str) -> Result<Self, CryptoError> {
        let bytes = b64_decode(text)?;
        let mut r = Reader::new(&bytes);
        let agreement = AgreementPublicKey::from_der(r.field()?)?;
        let signing = SigningPublicKey::from_der(r.field()?)?;
        r.finish()?;
        Ok(Self { agreement, signing })
    }
}

impl Signature {
    pub fn to_base64(&self) -> String {
        b64_encode(&self.0)
    }

    pub fn from_base64(text: &str) -> Result<Self, CryptoError> {
        let bytes = b64_decode(text)?;
        Self::from_slice(&bytes)
    }

    pub fn from_slice(bytes: &[u8]) -> Result<Self, CryptoError> {
        bytes
            .try_into()
            .map(Self)
            .map_err(|_| CryptoError::Wire(crate::wire::WireError::BadLength("signature", bytes.len())))
    }
}

/// ECDH followed by HKDF-SHA256 into a 256-bit AES key.
pub fn derive_shared_key(my_private: &AgreementSecret, their_public: &AgreementPublicKey) -> SymmetricKey {
    let shared = p256::ecdh::diffie_hellman(my_private.0.to_nonzero_scalar(), their_public.0.as_affine());
    let hk = Hkdf::<Sha256>::new(None, shared.raw_secret_bytes());
    let mut out = [0u8; 32];
    hk.expand(KDF_INFO, &mut out).expect("32 bytes is a valid HKDF length");
    SymmetricKey::from_bytes(out)
}

pub fn sign(message: &[u8], key: &SigningSecret) -> Signature {
    let sig: p256::ecdsa::Signature = key.0.sign(message);
    Signature(sig.to_bytes().into())
}

/// Malformed signatures verify as `false`.
pub fn verify_signature(message: &[u8], sig: &[u8], public: &SigningPublicKey) -> bool {
    let Ok(sig) = p256::ecdsa::Signature::from_slice(sig) else {
        return false;
    };
    public.0.verify(message, &sig).is_ok()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    fn rng() -> ChaCha20Rng {
        ChaCha20Rng::seed_from_u64(11)
    }

    #[test]
    fn identities_are_distinct() {
        let mut rng = rng();
        let a = generate_identity(&mut rng);
        let b = generate_identity(&mut rng);
        assert_ne!(a.public_bundle().encode(), b.public_bundle().encode());
    }

    #[test]
    fn bundle_round_trips_byte_identically() {
        let id = generate_identity(&mut rng());
        let text = id.public_bundle().encode();
        let back = PublicBundle::decode(&text).unwrap();
        assert_eq!(back.encode(), text);
        let sig = id.sign(b"m");
        assert!(verify_signature(b"m", &sig.0, &back.signing));
    }

    #[test]
    fn dh_symmetry_and_distinct_peers() {
        let mut rng = rng();
        let a = generate_identity(&mut rng);
        let b = generate_identity(&mut rng);
        let c = generate_identity(&mut rng);
        let ab = derive_shared_key(a.agreement(), &b.agreement().public_key());
        let ba = derive_shared_key(b.agreement(), &a.agreement().public_key());
        let ac = derive_shared_key(a.agreement(), &c.agreement().public_key());
        assert_eq!(ab.as_bytes(), ba.as_bytes());
        assert_ne!(ab.as_bytes(), ac.as_bytes());
    }

    #[test]
    fn malformed_public_key_rejected() {
        assert_eq!(AgreementPublicKey::from_der(&[0x30, 0x03, 1, 2, 3]), Err(CryptoError::InvalidPublicKey));
        // a valid SPKI prefix with the point's x coordinate corrupted
        let mut der = generate_identity(&mut rng()).agreement().public_key().to_der();
        let n = der.len();
        der[n - 40] ^= 0xff;
        assert!(AgreementPublicKey::from_der(&der).is_err());
    }

    #[test]
    fn signatures() {
        let mut rng = rng();
        let a = generate_identity(&mut rng);
        let b = generate_identity(&mut rng);
        let sig = a.sign(b"nonce-1");
        assert!(verify_signature(b"nonce-1", &sig.0, &a.signing().public_key()));
        assert!(!verify_signature(b"nonce-2", &sig.0, &a.signing().public_key()));
        assert!(!verify_signature(b"nonce-1", &sig.0, &b.signing().public_key()));
        assert!(!verify_signature(b"nonce-1", &sig.0[..10], &a.signing().public_key()));
    }

    #[test]
    fn pem_round_trip() {
        let id = generate_identity(&mut rng());
        let (a, s) = id.to_pem_pair();
        let back = IdentityKeys::from_pem_pair(&a, &s).unwrap();
        assert_eq!(back.public_bundle(), id.public_bundle());
        assert!(IdentityKeys::from_pem_pair("junk", &s).is_err());
    }
}
