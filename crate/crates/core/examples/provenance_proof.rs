//! Notarize a chatbot exchange, reveal only the question and the answer,
//! and check the proof the way the coordinator checks an audit.

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use veil::chatbot::{exchange_transcript, lorem, ExchangeParts};
use veil::crypto::SigningSecret;
use veil::provenance::{
    build_proof, check_audit_response, plan_reveal, verify_proof, LocalNotary, Notary, ResponseSchema,
    DEFAULT_MAX_AGE_SECS,
};

fn main() {
    let mut rng = ChaCha20Rng::seed_from_u64(3);
    let now = 1_700_000_000;
    let query = "Summarize the water cycle.";
    let answer = lorem(&mut rng, 600);
    let transcript = exchange_transcript(&ExchangeParts {
        thread_id: "6c1f0e7e9b5d4a7c8e2f1a3b4c5d6e7f",
        continues_thread: false,
        user_message_id: "0a1b2c3d4e5f60718293a4b5c6d7e8f9",
        reply_message_id: "f9e8d7c6b5a4938271605f4e3d2c1b0a",
        query,
        response: &answer,
        account_token: "acct-secret-0123456789",
        timestamp_secs: now,
    });

    let notary = LocalNotary::new(SigningSecret::generate(&mut rng), Some(3));
    let notarization = notary.notarize(&transcript).expect("notarized");
    let schema = ResponseSchema::mock_v1();
    let ranges = plan_reveal(&transcript, &schema, query).expect("query found");
    let proof = build_proof(&transcript, &notarization.salts, &notarization.commitment, &ranges).expect("proof");

    let view = verify_proof(&proof, &notary.public_key()).expect("signature and paths check");
    let shown: usize = view.request.iter().chain(&view.response).map(|(_, b)| b.len()).sum();
    println!(
        "transcript {} bytes, revealed {shown}, {} chunks withheld, proof {} bytes",
        transcript.request.len() + transcript.response.len(),
        proof.redacted.len(),
        proof.to_bytes().len()
    );
    let bytes = proof.to_bytes();
    println!("account token visible: {}", bytes.windows(11).any(|w| w == b"acct-secret"));

    let check = |text: &str, at| check_audit_response(&proof, &notary.public_key(), query, text, &schema, DEFAULT_MAX_AGE_SECS, at);
    println!("honest answer: {:?}", check(&answer, now));
    println!("substituted answer: {:?}", check("Water falls up.", now));
    println!("eleven minutes late: {:?}", check(&answer, now + 660));
}
