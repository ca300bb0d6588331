//! The coordinator and notary as HTTP services on loopback, with a proxy
//! agent and a user talking to them only through the wire API.

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use veil::api::CoordinatorApi;
use veil::chatbot::{MockChatbot, MockChatbotConfig, MOCK_BACKEND_ID};
use veil::clock::SystemClock;
use veil::coordinator::{Coordinator, CoordinatorConfig, CoordinatorKeys};
use veil::crypto::{generate_identity, IssuerKey, SigningSecret};
use veil::http::{coordinator_router, notary_router, HttpCoordinator, HttpNotary, ServerHandle};
use veil::provenance::{LocalNotary, Notary};
use veil::proxy::{Agent, DriverWaits, ProxyCore, SleepPause};
use veil::user::{choose_proxy, prepare_query};

fn main() {
    let mut rng = ChaCha20Rng::seed_from_u64(6);
    let clock = Arc::new(SystemClock);
    let loopback = "127.0.0.1:0".parse().unwrap();

    let notary = Arc::new(LocalNotary::new(SigningSecret::generate(&mut rng), None));
    let keys = CoordinatorKeys {
        issuer: IssuerKey::generate(&mut rng, 1024).unwrap(),
        bearer: SigningSecret::generate(&mut rng),
        notary: notary.public_key(),
    };
    let cfg = CoordinatorConfig { p_a: 0.0, ..CoordinatorConfig::default() };
    let coordinator = Arc::new(Coordinator::new(cfg, keys, clock.clone()).unwrap());
    let starter = coordinator.mint_bootstrap(1).unwrap().pop().unwrap();
    let coord_srv = ServerHandle::spawn(coordinator_router(coordinator), loopback).unwrap();
    let notary_srv = ServerHandle::spawn(notary_router(notary), loopback).unwrap();
    println!("coordinator at {}, notary at {}", coord_srv.url(), notary_srv.url());

    let api = Arc::new(HttpCoordinator::new(&coord_srv.url()));
    let remote_notary = Arc::new(HttpNotary::connect(&notary_srv.url()).unwrap());
    // no artificial waits and a fast chatbot, so the demo takes seconds
    let chatbot = MockChatbot::new(MockChatbotConfig { tokens_per_second: 5_000.0, ..MockChatbotConfig::default() }, clock.clone());
    let core = ProxyCore::new(
        "harbor",
        generate_identity(&mut rng),
        Box::new(chatbot),
        api.issuer_key().unwrap(),
        DriverWaits::zero(),
        None,
    );
    let mut agent = Agent::new(core, api.clone(), remote_notary, clock, Box::new(SleepPause));
    agent.ensure_registered().unwrap();

    let listings = api.list_proxies().unwrap();
    let proxy = choose_proxy(&listings, MOCK_BACKEND_ID, &mut rng).unwrap();
    let q = prepare_query(proxy, "Give me a haiku about routers.", MOCK_BACKEND_ID, None, starter, &mut rng);
    api.submit_query(&q.envelope).unwrap();
    println!("submitted {}", q.query_id());
    println!("proxy tick: {:?}", agent.tick().unwrap());
    let answer = q.open(&api.fetch_response(&q.query_id()).unwrap()).unwrap().expect("answered");
    println!("answer: {}...", &answer.text[..80]);
}
