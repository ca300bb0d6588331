#![allow(dead_code)]

use std::sync::{Arc, OnceLock};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use veil::chatbot::{MockChatbot, MockChatbotConfig, MOCK_BACKEND_ID};
use veil::clock::ManualClock;
use veil::coordinator::{Coordinator, CoordinatorConfig, CoordinatorKeys};
use veil::crypto::{generate_identity, IssuerKey, SigningSecret, DEFAULT_MODULUS_BITS};
use veil::provenance::{LocalNotary, Notary};
use veil::proxy::{Agent, ClockPause, DriverWaits, ProxyCore};
use veil::user::{prepare_query, PendingQuery};

pub const T0: u64 = 1_700_000_000_000;

/// Issuer key generation is slow; every test shares one.
pub fn issuer() -> IssuerKey {
    static KEY: OnceLock<IssuerKey> = OnceLock::new();
    KEY.get_or_init(|| {
        let mut rng = ChaCha20Rng::seed_from_u64(4242);
        IssuerKey::generate(&mut rng, DEFAULT_MODULUS_BITS).unwrap()
    })
    .clone()
}

pub struct World {
    pub clock: Arc<ManualClock>,
    pub coordinator: Arc<Coordinator>,
    pub notary: Arc<LocalNotary>,
}

pub fn world(cfg: CoordinatorConfig) -> World {
    world_with_issuer(cfg, issuer())
}

pub fn world_with_issuer(cfg: CoordinatorConfig, issuer: IssuerKey) -> World {
    let clock = Arc::new(ManualClock::new(T0));
    let mut rng = ChaCha20Rng::seed_from_u64(7);
    let notary_key = SigningSecret::generate(&mut rng);
    let notary = Arc::new(LocalNotary::new(notary_key, Some(8)));
    let keys = CoordinatorKeys {
        issuer,
        bearer: SigningSecret::generate(&mut rng),
        notary: notary.public_key(),
    };
    let coordinator = Arc::new(Coordinator::new(cfg, keys, clock.clone()).unwrap());
    World {
        clock,
        coordinator,
        notary,
    }
}

impl World {
    pub fn proxy_core(&self, name: &str, seed: u64) -> ProxyCore {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let chatbot = MockChatbot::new(
            MockChatbotConfig {
                seed,
                ..MockChatbotConfig::default()
            },
            self.clock.clone(),
        );
        ProxyCore::new(
            name,
            generate_identity(&mut rng),
            Box::new(chatbot),
            self.coordinator.issuer_public_key().clone(),
            DriverWaits::default(),
            Some(seed),
        )
    }

    pub fn agent(&self, core: ProxyCore) -> Agent {
        Agent::new(
            core,
            self.coordinator.clone(),
            self.notary.clone(),
            self.clock.clone(),
            Box::new(ClockPause(self.clock.clone())),
        )
    }
}

impl World {
    /// Registers `core` through the challenge flow and returns a bearer token.
    pub fn activate(&self, core: &mut ProxyCore) -> String {
        let set = self.coordinator.register_proxy(&core.register_request()).unwrap();
        let mut pause = ClockPause(self.clock.clone());
        let done = core.answer_challenges(&set, &*self.notary, &mut pause).unwrap();
        let outcome = self.coordinator.complete_registration(&done).unwrap();
        assert!(outcome.active, "{:?}", outcome.verdicts);
        self.token(core)
    }

    pub fn token(&self, core: &ProxyCore) -> String {
        let n = self.coordinator.issue_auth_nonce(core.pseudonym()).unwrap();
        self.coordinator.authenticate(&core.auth_request(&n.nonce)).unwrap().token
    }

    /// A sealed user query for `proxy`, paid with a fresh bootstrap token.
    pub fn user_query(&self, proxy: &str, text: &str, rng: &mut ChaCha20Rng) -> PendingQuery {
        let listing = self
            .coordinator
            .list_proxies()
            .into_iter()
            .find(|l| l.pseudonym == proxy)
            .expect("proxy listed");
        let payment = self.coordinator.mint_bootstrap(1).unwrap().pop().unwrap();
        prepare_query(&listing, text, MOCK_BACKEND_ID, None, payment, rng)
    }
}

/// A notarized mock exchange and the honest prover's proof for it.
pub struct AuditFixture {
    pub transcript: veil::provenance::SessionTranscript,
    pub notarization: veil::provenance::Notarization,
    pub proof: veil::provenance::RedactedProof,
    pub notary: veil::crypto::SigningPublicKey,
    pub query: String,
    pub response: String,
    pub account_token: String,
}

pub const FIXTURE_NOW_SECS: u64 = T0 / 1000;

pub fn audit_fixture(seed: u64) -> AuditFixture {
    use veil::chatbot::{exchange_transcript, lorem, ExchangeParts};
    use veil::provenance::{build_proof, plan_reveal, ResponseSchema};

    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let query = format!("Explain tides in {} words.", 100 + seed % 50);
    let response = lorem(&mut rng, 800 + (seed as usize % 400));
    let account_token = format!("acct-{seed:04}-Zq81xWv0TtR3pLm9");
    let hex = |rng: &mut ChaCha20Rng| format!("{:032x}", rng.gen::<u128>());
    let transcript = exchange_transcript(&ExchangeParts {
        thread_id: &hex(&mut rng),
        continues_thread: false,
        user_message_id: &hex(&mut rng),
        reply_message_id: &hex(&mut rng),
        query: &query,
        response: &response,
        account_token: &account_token,
        timestamp_secs: FIXTURE_NOW_SECS,
    });
    let key = SigningSecret::generate(&mut rng);
    let notary = LocalNotary::new(key, Some(seed));
    let notarization = notary.notarize(&transcript).unwrap();
    let ranges = plan_reveal(&transcript, &ResponseSchema::mock_v1(), &query).unwrap();
    let proof = build_proof(&transcript, &notarization.salts, &notarization.commitment, &ranges).unwrap();
    AuditFixture {
        transcript,
        notarization,
        proof,
        notary: notary.public_key(),
        query,
        response,
        account_token,
    }
}

impl AuditFixture {
    pub fn check(&self, proof: &veil::provenance::RedactedProof, now_secs: u64) -> veil::provenance::AuditVerdict {
        veil::provenance::check_audit_response(
            proof,
            &self.notary,
            &self.query,
            &self.response,
            &veil::provenance::ResponseSchema::mock_v1(),
            veil::provenance::DEFAULT_MAX_AGE_SECS,
            now_secs,
        )
    }

    /// Values the proof must keep hidden: the account credential and the
    /// conversation identifiers.
    pub fn secrets(&self) -> Vec<String> {
        let body = |stream: &[u8]| {
            let sep = stream.windows(4).position(|w| w == b"\r\n\r\n").unwrap();
            serde_json::from_slice::<serde_json::Value>(&stream[sep + 4..]).unwrap()
        };
        let req = body(&self.transcript.request);
        let resp = body(&self.transcript.response);
        vec![
            self.account_token.clone(),
            req["messages"][0]["id"].as_str().unwrap().to_string(),
            resp["conversation_id"].as_str().unwrap().to_string(),
            resp["message"]["id"].as_str().unwrap().to_string(),
        ]
    }

    /// 8-byte windows of withheld chunks made only of secret bytes. Windows
    /// touching public framing (JSON keys, header names) also appear in
    /// revealed text and are not leaks.
    pub fn secret_windows(&self) -> Vec<Vec<u8>> {
        use veil::provenance::{Stream, CHUNK_SIZE};
        let secrets = self.secrets();
        let mask = |data: &[u8]| {
            let mut m = vec![false; data.len()];
            for s in &secrets {
                let s = s.as_bytes();
                for at in 0..data.len().saturating_sub(s.len() - 1) {
                    if &data[at..at + s.len()] == s {
                        m[at..at + s.len()].fill(true);
                    }
                }
            }
            m
        };
        let (req_mask, resp_mask) = (mask(&self.transcript.request), mask(&self.transcript.response));
        let mut out = Vec::new();
        for (s, i) in &self.proof.redacted {
            let (data, m) = match s {
                Stream::Request => (&self.transcript.request, &req_mask),
                Stream::Response => (&self.transcript.response, &resp_mask),
            };
            let start = *i as usize * CHUNK_SIZE;
            let end = (start + CHUNK_SIZE).min(data.len());
            for w in start..end.saturating_sub(7) {
                if m[w..w + 8].iter().all(|b| *b) {
                    out.push(data[w..w + 8].to_vec());
                }
            }
        }
        out
    }
}

/// Serialized proof with the commitment's server name blanked: that name is
/// signed public metadata, not something the prover chose to reveal.
pub fn scannable_proof_bytes(proof: &veil::provenance::RedactedProof) -> Vec<u8> {
    let mut bytes = proof.to_bytes();
    let name = proof.commitment.server_name.as_bytes();
    if let Some(at) = bytes.windows(name.len()).position(|w| w == name) {
        bytes[at..at + name.len()].fill(0);
    }
    bytes
}

/// The first window that shows up in `haystack`.
pub fn leaked_window(windows: &[Vec<u8>], haystack: &[u8]) -> Option<Vec<u8>> {
    let seen: std::collections::HashSet<&[u8]> = haystack.windows(8).collect();
    windows.iter().find(|w| seen.contains(w.as_slice())).cloned()
}
