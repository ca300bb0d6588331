//! A user and a proxy agree on a key from their P-256 identities and
//! exchange a sealed message; tampering or the wrong context is caught.

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use veil::crypto::{derive_shared_key, generate_identity, open, seal, verify_signature};

fn main() {
    let mut rng = ChaCha20Rng::seed_from_u64(1);
    let user = generate_identity(&mut rng);
    let proxy = generate_identity(&mut rng);

    let k_user = derive_shared_key(user.agreement(), &proxy.agreement().public_key());
    let k_proxy = derive_shared_key(proxy.agreement(), &user.agreement().public_key());
    assert_eq!(k_user.as_bytes(), k_proxy.as_bytes());

    let aad = b"query-id:0001";
    let sealed = seal(&k_user, b"What is the capital of Mongolia?", aad, &mut rng);
    println!("sealed {} bytes", sealed.to_bytes().len());
    let plain = open(&k_proxy, &sealed, aad).expect("opens with the shared key");
    println!("proxy reads: {}", String::from_utf8_lossy(&plain));

    println!("wrong context opens: {}", open(&k_proxy, &sealed, b"query-id:0002").is_ok());
    let mut bytes = sealed.to_bytes();
    let last = bytes.len() - 1;
    bytes[last] ^= 1;
    let flipped = veil::crypto::SealedBox::from_bytes(&bytes).unwrap();
    println!("flipped bit opens: {}", open(&k_proxy, &flipped, aad).is_ok());

    let sig = user.sign(b"thread ownership");
    let ok = verify_signature(b"thread ownership", &sig.0, &user.signing().public_key());
    println!("signature verifies: {ok}");
    let bundle = user.public_bundle();
    println!("public keys: {} / {}", bundle.agreement.to_base64(), bundle.signing.to_base64());
}
