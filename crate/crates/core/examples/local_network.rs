//! A coordinator, a notary, one volunteer proxy and one user, all in one
//! process on a virtual clock: registration, an audit, a paid query and a
//! follow-up in the same chatbot thread.

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use veil::chatbot::{MockChatbot, MockChatbotConfig, MOCK_BACKEND_ID};
use veil::clock::ManualClock;
use veil::coordinator::{Coordinator, CoordinatorConfig, CoordinatorKeys};
use veil::crypto::{generate_identity, IssuerKey, SigningSecret};
use veil::protocol::FetchStatus;
use veil::provenance::{LocalNotary, Notary};
use veil::proxy::{Agent, ClockPause, DriverWaits, ProxyCore};
use veil::user::{choose_proxy, prepare_query};

fn main() {
    let mut rng = ChaCha20Rng::seed_from_u64(5);
    let clock = Arc::new(ManualClock::new(1_700_000_000_000));
    let notary = Arc::new(LocalNotary::new(SigningSecret::generate(&mut rng), None));
    let keys = CoordinatorKeys {
        issuer: IssuerKey::generate(&mut rng, 1024).unwrap(),
        bearer: SigningSecret::generate(&mut rng),
        notary: notary.public_key(),
    };
    // audit every first query so the example shows one
    let cfg = CoordinatorConfig { p_a: 1.0, seed: Some(5), ..CoordinatorConfig::default() };
    let coordinator = Arc::new(Coordinator::new(cfg, keys, clock.clone()).unwrap());

    let chatbot = MockChatbot::new(MockChatbotConfig::default(), clock.clone());
    let core = ProxyCore::new(
        "lighthouse",
        generate_identity(&mut rng),
        Box::new(chatbot),
        coordinator.issuer_public_key().clone(),
        DriverWaits::default(),
        Some(5),
    );
    let mut agent = Agent::new(core, coordinator.clone(), notary, clock.clone(), Box::new(ClockPause(clock.clone())));
    agent.ensure_registered().expect("passes the registration challenges");
    println!("proxy registered; listed: {:?}", coordinator.list_proxies().iter().map(|l| &l.pseudonym).collect::<Vec<_>>());

    let mut tokens = coordinator.mint_bootstrap(2).unwrap();
    let listings = coordinator.list_proxies();
    let proxy = choose_proxy(&listings, MOCK_BACKEND_ID, &mut rng).expect("a proxy serves the backend");
    let first = prepare_query(proxy, "Why is the sky blue?", MOCK_BACKEND_ID, None, tokens.pop().unwrap(), &mut rng);
    coordinator.submit_query(&first.envelope).unwrap();

    // the audit comes first and holds the user query back until it is proven
    while coordinator.fetch_response(&first.query_id()).unwrap().status != FetchStatus::Ready {
        let r = agent.tick().unwrap();
        println!("tick: {r:?}");
    }
    let answer = first.open(&coordinator.fetch_response(&first.query_id()).unwrap()).unwrap().unwrap();
    println!("answer ({} chars): {}...", answer.text.len(), &answer.text[..60]);
    println!("proxy wallet after the audit: {} token(s)", agent.core().wallet().len());

    let thread = first.thread(&answer).expect("answer names its thread");
    let follow = prepare_query(proxy, "And at sunset?", MOCK_BACKEND_ID, Some(&thread), tokens.pop().unwrap(), &mut rng);
    coordinator.submit_query(&follow.envelope).unwrap();
    while coordinator.fetch_response(&follow.query_id()).unwrap().status != FetchStatus::Ready {
        println!("tick: {:?}", agent.tick().unwrap());
    }
    let reply = follow.open(&coordinator.fetch_response(&follow.query_id()).unwrap()).unwrap().unwrap();
    println!("follow-up stayed in thread {}: {}", thread.thread_id, reply.thread_id.as_deref() == Some(thread.thread_id.as_str()));
    println!("proxy stats: {:?}", coordinator.proxy_stats("lighthouse").unwrap());
}
