use std::fmt;

use aes_gcm::aead::{AeadInPlace, KeyInit};
use aes_gcm::{Aes256Gcm, Nonce, Tag};
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use sha2::{Digest, Sha256};

use super::{CryptoError, SecureRng};
use crate::wire::{b64_decode, b64_encode, Reader, Writer};

/// 256-bit AES key derived from an ECDH agreement.
#[derive(Clone, PartialEq, Eq)]
pub struct SymmetricKey([u8; 32]);

impl SymmetricKey {
    pub fn from_bytes(bytes: [u8; 32]) -> Self {
        Self(bytes)
    }

    pub fn as_bytes(&self) -> &[u8; 32] {
        &self.0
    }
}

impl fmt::Debug for SymmetricKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("SymmetricKey(..)")
    }
}

/// AES-256-GCM ciphertext with its nonce, tag and a digest of the associated
/// data it was sealed under.
#[derive(Clone, PartialEq, Eq, Debug)]
pub struct SealedBox {
    pub nonce: [u8; 12],
    pub ciphertext: Vec<u8>,
    pub tag: [u8; 16],
    pub aad_digest: [u8; 32],
}

pub fn seal(key: &SymmetricKey, plaintext: &[u8], aad: &[u8], rng: &mut impl SecureRng) -> SealedBox {
    let mut nonce = [0u8; 12];
    rng.fill_bytes(&mut nonce);
    let cipher = Aes256Gcm::new((&key.0).into());
    let mut buf = plaintext.to_vec();
    let tag = cipher
        .encrypt_in_place_detached(&Nonce::from(nonce), aad, &mut buf)
        .expect("plaintext within AES-GCM limits");
    SealedBox {
        nonce,
        ciphertext: buf,
        tag: tag.into(),
        aad_digest: Sha256::digest(aad).into(),
    }
}

pub fn open(key: &SymmetricKey, sealed: &SealedBox, aad: &[u8]) -> Result<Vec<u8>, CryptoError> {
    let digest: [u8; 32] = Sha256::digest(aad).into();
    if digest != sealed.aad_digest {
        return Err(CryptoError::AuthFailure);
    }
    let cipher = Aes256Gcm::new((&key.0).into());
    let mut buf = sealed.ciphertext.clone();
    cipher
        .decrypt_in_place_detached(
            &Nonce::from(sealed.nonce),
            aad,
            &mut buf,
            &Tag::from(sealed.tag),
        )
        .map_err(|_| CryptoError::AuthFailure)?;
    Ok(buf)
}

impl SealedBox {
    pub fn to_bytes(&self) -> Vec<u8> {
        Writer::new()
            .field(&self.nonce)
            .field(&self.ciphertext)
            .field(&self.tag)
            .field(&self.aad_digest)
            .finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CryptoError> {
        let mut r = Reader::new(bytes);
        let nonce = r.fixed::<12>("nonce")?;
        let ciphertext = r.field()?.to_vec();
        let tag = r.fixed::<16>("tag")?;
        let aad_digest = r.fixed::<32>("aad_digest")?;
        r.finish()?;
        Ok(Self {
            nonce,
            ciphertext,
            tag,
            aad_digest,
        })
    }
}

impl Serialize for SealedBox {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&b64_encode(&self.to_bytes()))
    }
}

impl<'de> Deserialize<'de> for SealedBox {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let text = String::deserialize(d)?;
        let bytes = b64_decode(&text).map_err(serde::de::Error::custom)?;
        Self::from_bytes(&bytes).map_err(serde::de::Error::custom)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    fn key(b: u8) -> SymmetricKey {
        SymmetricKey::from_bytes([b; 32])
    }

    #[test]
    fn round_trip_and_wrong_inputs() {
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        let sealed = seal(&key(1), b"hello", b"slot-1", &mut rng);
        assert_eq!(open(&key(1), &sealed, b"slot-1").unwrap(), b"hello");
        assert_eq!(open(&key(2), &sealed, b"slot-1"), Err(CryptoError::AuthFailure));
        assert_eq!(open(&key(1), &sealed, b"slot-2"), Err(CryptoError::AuthFailure));
        let mut flipped = sealed.clone();
        flipped.ciphertext[0] ^= 1;
        assert_eq!(open(&key(1), &flipped, b"slot-1"), Err(CryptoError::AuthFailure));
    }

    #[test]
    fn empty_plaintext() {
        let mut rng = ChaCha20Rng::seed_from_u64(2);
        let sealed = seal(&key(3), b"", b"", &mut rng);
        assert_eq!(open(&key(3), &sealed, b"").unwrap(), b"");
    }

    proptest! {
        #[test]
        fn any_single_bit_flip_fails(
            plaintext in proptest::collection::vec(any::<u8>(), 1..64),
            aad in proptest::collection::vec(any::<u8>(), 0..16),
            seed in any::<u64>(),
            bit in any::<prop::sample::Index>(),
        ) {
            let mut rng = ChaCha20Rng::seed_from_u64(seed);
            let sealed = seal(&key(9), &plaintext, &aad, &mut rng);
            prop_assert_eq!(open(&key(9), &sealed, &aad).unwrap(), plaintext);

            let mut bytes = sealed.to_bytes();
            // skip the length prefixes; they are framing, not box content
            let content: Vec<usize> = (0..bytes.len())
                .filter(|i| {
                    let nonce = 4..16;
                    let ct = 20..20 + sealed.ciphertext.len();
                    let tag_start = 24 + sealed.ciphertext.len();
                    let tag = tag_start..tag_start + 16;
                    let aad_d = tag_start + 20..tag_start + 52;
                    nonce.contains(i) || ct.contains(i) || tag.contains(i) || aad_d.contains(i)
                })
                .collect();
            let pos = content[bit.index(content.len() * 8) / 8];
            bytes[pos] ^= 1 << (bit.index(8));
            let mutated = SealedBox::from_bytes(&bytes).unwrap();
            prop_assert!(open(&key(9), &mutated, &aad).is_err());

            if !aad.is_empty() {
                let mut aad2 = aad.clone();
                aad2[0] ^= 0x80;
                prop_assert!(open(&key(9), &sealed, &aad2).is_err());
            }
        }
    }
}
