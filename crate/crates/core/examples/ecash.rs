//! Blind-signature e-cash: the issuer signs a token it never sees, and
//! cannot link the spent token back to the signing request.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use veil::crypto::{ecash_blind, ecash_sign_blinded, ecash_unblind, ecash_verify, IssuerKey, ECASH_MESSAGE_LEN};

fn main() {
    let mut rng = ChaCha20Rng::seed_from_u64(2);
    // 1024 bits keeps the demo quick; the services default to 2048
    let issuer = IssuerKey::generate(&mut rng, 1024).expect("key generation");
    let public = issuer.public_key();

    let mut message = [0u8; ECASH_MESSAGE_LEN];
    rng.fill(&mut message[..]);
    let (blinded, secret) = ecash_blind(&message, &public, &mut rng).expect("blinds");
    println!("blinded request: {} bytes", blinded.len());

    let blind_sig = ecash_sign_blinded(&blinded, &issuer).expect("issuer signs");
    let token = ecash_unblind(&blind_sig, &secret, &public).expect("unblinds");
    println!("token verifies: {}", ecash_verify(&token, &public));
    println!("signature differs from what the issuer saw: {}", token.signature != blind_sig);

    let mut forged = token.clone();
    forged.message[0] ^= 1;
    println!("altered token verifies: {}", ecash_verify(&forged, &public));

    let other = IssuerKey::generate(&mut rng, 1024).unwrap();
    println!("token verifies under another issuer: {}", ecash_verify(&token, &other.public_key()));
    println!("wallet line: {}", token.to_base64());
}
