mod common;

use std::collections::BTreeSet;

use common::{world, World, T0};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use veil::coordinator::{AuditPhase, CoordinatorConfig, CoordinatorError, ProxyStatus};
use veil::crypto::generate_identity;
use veil::protocol::{DownvoteRequest, FetchStatus, QueryId};
use veil::provenance::FailureReason;
use veil::proxy::{ClockPause, Honesty, ProxyCore};

const MIN: u64 = 60_000;
const DAY: u64 = 86_400_000;

fn quiet() -> World {
    world(CoordinatorConfig {
        p_a: 0.0,
        seed: Some(5),
        ..CoordinatorConfig::default()
    })
}

fn rng(seed: u64) -> ChaCha20Rng {
    ChaCha20Rng::seed_from_u64(seed)
}

fn answer(w: &World, core: &mut ProxyCore, token: &str) -> usize {
    let polled = w.coordinator.poll_queries(token).unwrap();
    let mut pause = ClockPause(w.clock.clone());
    for env in &polled.queries {
        let h = core.handle_envelope(env, &mut pause).unwrap();
        w.coordinator.submit_response(token, &h.respond).unwrap();
    }
    polled.queries.len()
}

#[test]
fn challenges_carry_fresh_nonces() {
    let w = quiet();
    let a = w.proxy_core("a", 1);
    let b = w.proxy_core("b", 2);
    let ca = w.coordinator.register_proxy(&a.register_request()).unwrap();
    let cb = w.coordinator.register_proxy(&b.register_request()).unwrap();
    assert_eq!(ca.deadline, T0 + 600_000);
    for c in ca.challenges.iter().chain(&cb.challenges) {
        assert_eq!(c.nonce.len(), 16);
        assert!(c.nonce.chars().all(|ch| ch.is_ascii_hexdigit()));
        assert!(c.text.contains(&c.nonce));
    }
    let na: BTreeSet<_> = ca.challenges.iter().map(|c| &c.nonce).collect();
    let nb: BTreeSet<_> = cb.challenges.iter().map(|c| &c.nonce).collect();
    assert!(na.is_disjoint(&nb));
    assert_eq!(w.coordinator.proxy_record("a").unwrap().status, ProxyStatus::Pending);
}

#[test]
fn duplicate_and_banned_pseudonyms() {
    let w = quiet();
    let a = w.proxy_core("a", 1);
    w.coordinator.register_proxy(&a.register_request()).unwrap();
    assert_eq!(w.coordinator.register_proxy(&a.register_request()), Err(CoordinatorError::DuplicatePseudonym));

    // a dishonest proxy is banned by its first audit and must pick a new name
    let w = world(CoordinatorConfig {
        p_a: 1.0,
        seed: Some(5),
        ..CoordinatorConfig::default()
    });
    let mut cheat = w.proxy_core("cheat", 3).with_honesty(Honesty::Strategic { p_h: 0.0 });
    let token = w.activate(&mut cheat);
    let q = w.user_query("cheat", "Why is the sky blue?", &mut rng(1));
    w.coordinator.submit_query(&q.envelope).unwrap();
    answer(&w, &mut cheat, &token);
    let audit = w.coordinator.pending_audit("cheat").unwrap();
    assert_eq!(audit.phase, AuditPhase::AwaitingProof);
    let mut pause = ClockPause(w.clock.clone());
    let proof = cheat.prove(&audit.query_id, &*w.notary, &mut pause).unwrap();
    let resp = w.coordinator.verify_audit(&token, &proof).unwrap();
    assert_eq!(resp.verdict.reason, Some(FailureReason::ResponseMismatch));
    assert!(resp.blinded_signature.is_none());
    assert_eq!(w.coordinator.proxy_record("cheat").unwrap().status, ProxyStatus::Banned);
    assert_eq!(w.coordinator.poll_queries(&token), Err(CoordinatorError::AuthRejected));
    assert_eq!(w.coordinator.register_proxy(&cheat.register_request()), Err(CoordinatorError::BannedPseudonym));
    // the genuine query it was sitting on fails instead of hanging
    assert_eq!(w.coordinator.fetch_response(&q.query_id()).unwrap().status, FetchStatus::Failed);
    assert!(w.coordinator.list_proxies().is_empty());
}

#[test]
fn registration_deadline_is_inclusive() {
    let w = quiet();
    let mut pause = ClockPause(w.clock.clone());
    let mut on_time = w.proxy_core("on-time", 1);
    let mut late = w.proxy_core("late", 2);
    let set_a = w.coordinator.register_proxy(&on_time.register_request()).unwrap();
    let set_b = w.coordinator.register_proxy(&late.register_request()).unwrap();
    let done_a = on_time.answer_challenges(&set_a, &*w.notary, &mut pause).unwrap();
    let done_b = late.answer_challenges(&set_b, &*w.notary, &mut pause).unwrap();

    w.clock.set(set_a.deadline);
    assert!(w.coordinator.complete_registration(&done_a).unwrap().active);
    w.clock.set(set_b.deadline + 1_000);
    assert_eq!(w.coordinator.complete_registration(&done_b), Err(CoordinatorError::DeadlineExceeded));
    assert_ne!(w.coordinator.proxy_record("late").unwrap().status, ProxyStatus::Active);
}

#[test]
fn proof_for_another_question_is_rejected() {
    let w = quiet();
    let mut pause = ClockPause(w.clock.clone());
    let mut p = w.proxy_core("p", 1);
    let mut set = w.coordinator.register_proxy(&p.register_request()).unwrap();
    set.challenges[0].text = "Name any planet.".into();
    let done = p.answer_challenges(&set, &*w.notary, &mut pause).unwrap();
    let out = w.coordinator.complete_registration(&done).unwrap();
    assert!(!out.active);
    assert_eq!(out.verdicts[0].reason, Some(FailureReason::QueryMismatch));
}

#[test]
fn nonce_authentication() {
    let w = quiet();
    let mut p = w.proxy_core("p", 1);
    let pending = w.proxy_core("pending", 2);
    w.coordinator.register_proxy(&pending.register_request()).unwrap();
    assert_eq!(w.coordinator.issue_auth_nonce("pending"), Err(CoordinatorError::NotActive));
    assert_eq!(w.coordinator.issue_auth_nonce("nobody"), Err(CoordinatorError::UnknownProxy));
    w.activate(&mut p);

    let n = w.coordinator.issue_auth_nonce("p").unwrap();
    assert_eq!(n.expires_at, w.clock_now() + 120_000);
    let req = p.auth_request(&n.nonce);
    let tok = w.coordinator.authenticate(&req).unwrap();
    assert_eq!(tok.expires_at, w.clock_now() + DAY);
    assert_eq!(w.coordinator.authenticate(&req), Err(CoordinatorError::NonceInvalid));

    // signed by someone else's key
    let n = w.coordinator.issue_auth_nonce("p").unwrap();
    let mut forged = p.auth_request(&n.nonce);
    let other = generate_identity(&mut rng(9));
    forged.signature = other.sign(&veil::protocol::auth_message("p", &n.nonce));
    assert_eq!(w.coordinator.authenticate(&forged), Err(CoordinatorError::BadSignature));

    // expired nonce
    let n = w.coordinator.issue_auth_nonce("p").unwrap();
    w.clock.advance(121_000);
    assert_eq!(w.coordinator.authenticate(&p.auth_request(&n.nonce)), Err(CoordinatorError::NonceInvalid));
}

#[test]
fn bearer_token_expires_after_a_day() {
    let w = quiet();
    let mut p = w.proxy_core("p", 1);
    let token = w.activate(&mut p);
    w.clock.advance(DAY - 1);
    assert!(w.coordinator.poll_queries(&token).is_ok());
    w.clock.advance(1);
    assert_eq!(w.coordinator.poll_queries(&token), Err(CoordinatorError::AuthExpired));
    assert_eq!(w.coordinator.poll_queries("not.a.token"), Err(CoordinatorError::AuthRejected));
}

#[test]
fn listing_follows_recent_contact() {
    let w = quiet();
    let mut p = w.proxy_core("p", 1);
    w.activate(&mut p);
    let seen = w.coordinator.proxy_record("p").unwrap().last_contact;
    w.clock.set(seen + 4 * MIN);
    assert_eq!(w.coordinator.list_proxies().len(), 1);
    w.clock.set(seen + 6 * MIN);
    assert!(w.coordinator.list_proxies().is_empty());
    // polling brings it back
    let token = w.token(&p);
    w.coordinator.poll_queries(&token).unwrap();
    assert_eq!(w.coordinator.list_proxies().len(), 1);
}

#[test]
fn poll_delivers_once_then_redelivers_after_timeout() {
    let w = quiet();
    let mut p = w.proxy_core("p", 1);
    let token = w.activate(&mut p);
    let q = w.user_query("p", "Capital of Peru?", &mut rng(1));
    w.coordinator.submit_query(&q.envelope).unwrap();

    let first = w.coordinator.poll_queries(&token).unwrap();
    assert_eq!(first.queries.len(), 1);
    assert_eq!(first.queries[0].query_id, q.query_id());
    assert!(w.coordinator.poll_queries(&token).unwrap().queries.is_empty());
    w.clock.advance(59_999);
    assert!(w.coordinator.poll_queries(&token).unwrap().queries.is_empty());
    w.clock.advance(1);
    assert_eq!(w.coordinator.poll_queries(&token).unwrap().queries.len(), 1);
}

#[test]
fn responses_are_owner_only_and_fetchable() {
    let w = quiet();
    let mut a = w.proxy_core("a", 1);
    let mut b = w.proxy_core("b", 2);
    let ta = w.activate(&mut a);
    let tb = w.activate(&mut b);
    let q = w.user_query("a", "Who wrote Hamlet?", &mut rng(1));
    assert_eq!(w.coordinator.fetch_response(&q.query_id()), Err(CoordinatorError::NotFound));
    w.coordinator.submit_query(&q.envelope).unwrap();
    assert_eq!(w.coordinator.fetch_response(&q.query_id()).unwrap().status, FetchStatus::Pending);

    let env = w.coordinator.poll_queries(&ta).unwrap().queries.remove(0);
    let h = a.handle_envelope(&env, &mut ClockPause(w.clock.clone())).unwrap();
    assert_eq!(w.coordinator.submit_response(&tb, &h.respond), Err(CoordinatorError::Forbidden));
    w.coordinator.submit_response(&ta, &h.respond).unwrap();
    assert_eq!(w.coordinator.submit_response(&ta, &h.respond), Err(CoordinatorError::AlreadyAnswered));

    let fetched = w.coordinator.fetch_response(&q.query_id()).unwrap();
    assert_eq!(fetched.status, FetchStatus::Ready);
    assert!(q.open(&fetched).unwrap().unwrap().text.len() >= 800);
    assert_eq!(w.coordinator.fetch_response(&QueryId([9; 16])), Err(CoordinatorError::NotFound));
    let _ = b;
}

#[test]
fn payment_checks() {
    let w = quiet();
    let mut p = w.proxy_core("p", 1);
    w.activate(&mut p);
    let q = w.user_query("p", "Q1", &mut rng(1));
    w.coordinator.submit_query(&q.envelope).unwrap();
    assert_eq!(w.coordinator.spent_count(), 1);

    // same coin, new slot
    let mut again = w.user_query("p", "Q2", &mut rng(2));
    again.envelope.payment = q.envelope.payment.clone();
    assert_eq!(w.coordinator.submit_query(&again.envelope), Err(CoordinatorError::DoubleSpend));

    // coin from a different issuer
    let foreign = veil::crypto::IssuerKey::generate(&mut rng(3), 1024).unwrap();
    let mut forged = w.user_query("p", "Q3", &mut rng(3));
    forged.envelope.payment = foreign.mint(&mut rng(4));
    assert_eq!(w.coordinator.submit_query(&forged.envelope), Err(CoordinatorError::InvalidToken));

    let mut lost = w.user_query("p", "Q4", &mut rng(5));
    lost.envelope.proxy_pseudonym = "ghost".into();
    assert_eq!(w.coordinator.submit_query(&lost.envelope), Err(CoordinatorError::UnknownProxy));
    assert_eq!(w.coordinator.spent_count(), 1);
}

#[test]
fn audit_blocks_genuine_queries_until_proven() {
    let w = world(CoordinatorConfig {
        p_a: 1.0,
        seed: Some(5),
        ..CoordinatorConfig::default()
    });
    let mut p = w.proxy_core("p", 1);
    let token = w.activate(&mut p);
    let q = w.user_query("p", "What is 2+2?", &mut rng(1));
    w.coordinator.submit_query(&q.envelope).unwrap();
    let audit = w.coordinator.pending_audit("p").unwrap();
    assert_eq!(audit.phase, AuditPhase::AwaitingResponse);
    assert_eq!(audit.trigger, Some(q.query_id()));

    let polled = w.coordinator.poll_queries(&token).unwrap();
    assert_eq!(polled.queries.len(), 1);
    assert_eq!(polled.queries[0].query_id, audit.query_id);
    let mut pause = ClockPause(w.clock.clone());
    let h = p.handle_envelope(&polled.queries[0], &mut pause).unwrap();
    w.coordinator.submit_response(&token, &h.respond).unwrap();

    // answered but unproven: still blocked, proof requested
    assert_eq!(w.coordinator.pending_audit("p").unwrap().phase, AuditPhase::AwaitingProof);
    w.clock.advance(2 * MIN);
    let polled = w.coordinator.poll_queries(&token).unwrap();
    assert!(polled.queries.is_empty());
    assert_eq!(polled.proof_requests, vec![audit.query_id]);

    let proof = p.prove(&audit.query_id, &*w.notary, &mut pause).unwrap();
    let resp = w.coordinator.verify_audit(&token, &proof).unwrap();
    assert!(resp.verdict.passed, "{:?}", resp.verdict);
    assert!(p.accept_verdict(&audit.query_id, &resp).unwrap());
    assert_eq!(p.wallet().len(), 1);
    assert_eq!(w.coordinator.verify_audit(&token, &proof), Err(CoordinatorError::NoPendingAudit));

    let polled = w.coordinator.poll_queries(&token).unwrap();
    assert_eq!(polled.queries.len(), 1);
    assert_eq!(polled.queries[0].query_id, q.query_id());
}

#[test]
fn audit_draws_while_blocked_are_deferred() {
    let w = world(CoordinatorConfig {
        p_a: 1.0,
        seed: Some(5),
        ..CoordinatorConfig::default()
    });
    let mut p = w.proxy_core("p", 1);
    let token = w.activate(&mut p);
    for i in 0..3 {
        let q = w.user_query("p", &format!("Question {i}?"), &mut rng(i));
        w.coordinator.submit_query(&q.envelope).unwrap();
    }
    assert_eq!(w.coordinator.counters().audits_scheduled, 3);
    assert_eq!(w.coordinator.counters().audit_payments, 1);

    let mut pause = ClockPause(w.clock.clone());
    let mut seen = BTreeSet::new();
    for round in 0..3 {
        let audit = w.coordinator.pending_audit("p").unwrap();
        assert!(seen.insert(audit.query_id), "round {round} reissued an audit");
        assert_eq!(answer(&w, &mut p, &token), 1);
        let proof = p.prove(&audit.query_id, &*w.notary, &mut pause).unwrap();
        let resp = w.coordinator.verify_audit(&token, &proof).unwrap();
        p.accept_verdict(&audit.query_id, &resp).unwrap();
    }
    assert!(w.coordinator.pending_audit("p").is_none());
    assert_eq!(w.coordinator.counters().audits_passed, 3);
    assert_eq!(p.wallet().len(), 3);
    // now the three genuine queries flow
    assert_eq!(answer(&w, &mut p, &token), 3);
}

#[test]
fn unproven_audit_times_out_into_a_ban() {
    let w = world(CoordinatorConfig {
        p_a: 1.0,
        seed: Some(5),
        ..CoordinatorConfig::default()
    });
    let mut p = w.proxy_core("p", 1);
    let token = w.activate(&mut p);
    let q = w.user_query("p", "Q?", &mut rng(1));
    w.coordinator.submit_query(&q.envelope).unwrap();
    answer(&w, &mut p, &token);
    w.clock.advance(3_600_001);
    assert_eq!(w.coordinator.poll_queries(&token), Err(CoordinatorError::AuthRejected));
    assert_eq!(w.coordinator.proxy_record("p").unwrap().status, ProxyStatus::Banned);
}

#[test]
fn downvotes_need_the_query_key() {
    let w = quiet();
    let mut p = w.proxy_core("p", 1);
    let token = w.activate(&mut p);
    let q = w.user_query("p", "Q?", &mut rng(1));
    w.coordinator.submit_query(&q.envelope).unwrap();
    assert_eq!(w.coordinator.downvote(&q.query_id(), &q.downvote_request()), Err(CoordinatorError::NotAnswered));
    answer(&w, &mut p, &token);

    let stranger = generate_identity(&mut rng(2));
    let forged = DownvoteRequest {
        signature: stranger.sign(&veil::protocol::downvote_message(&q.query_id())),
    };
    assert_eq!(w.coordinator.downvote(&q.query_id(), &forged), Err(CoordinatorError::Forbidden));
    w.coordinator.downvote(&q.query_id(), &q.downvote_request()).unwrap();
    assert_eq!(w.coordinator.downvote(&q.query_id(), &q.downvote_request()), Err(CoordinatorError::AlreadyVoted));
    assert_eq!(w.coordinator.proxy_stats("p").unwrap().downvote_rate, Some(1.0));
}

#[test]
fn purge_removes_only_expired_messages() {
    let w = quiet();
    assert_eq!(w.coordinator.purge_expired().unwrap(), 0);
    let mut p = w.proxy_core("p", 1);
    w.activate(&mut p);
    let start = w.clock_now();
    let mut ids = Vec::new();
    // ages at purge time: 35, 31, 29 and 1 days
    for (i, offset) in [0u64, 4, 6, 34].into_iter().enumerate() {
        w.clock.set(start + offset * DAY);
        w.coordinator.poll_queries(&w.token(&p)).unwrap();
        let q = w.user_query("p", &format!("Q{i}"), &mut rng(i as u64));
        w.coordinator.submit_query(&q.envelope).unwrap();
        ids.push(q.query_id());
    }
    w.clock.set(start + 35 * DAY);
    assert_eq!(w.coordinator.purge_expired().unwrap(), 2);
    assert_eq!(w.coordinator.fetch_response(&ids[0]), Err(CoordinatorError::NotFound));
    assert_eq!(w.coordinator.fetch_response(&ids[1]), Err(CoordinatorError::NotFound));
    assert!(w.coordinator.fetch_response(&ids[2]).is_ok());
    assert!(w.coordinator.fetch_response(&ids[3]).is_ok());
    assert!(w.coordinator.proxy_record("p").is_some());
    assert_eq!(w.coordinator.stored_query_count(), 2);
    assert_eq!(w.coordinator.purge_expired().unwrap(), 0);
}

trait ClockNow {
    fn clock_now(&self) -> u64;
}

impl ClockNow for World {
    fn clock_now(&self) -> u64 {
        use veil::clock::Clock;
        self.clock.now_ms()
    }
}
