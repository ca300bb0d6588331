//! Discrete-event simulation of the whole system on a virtual clock: users,
//! honest and dishonest proxies and the coordinator, with Tor-like hop
//! latency between them and the mock chatbot behind every proxy.
//!
//! Every message goes through the real coordinator, proxy and user code;
//! only time and the network are simulated. Given a seed the report is
//! reproducible byte for byte.

use std::cmp::Reverse;
use std::collections::{BTreeMap, BTreeSet, BinaryHeap, VecDeque};
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Exp, LogNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::chatbot::{MockChatbot, MockChatbotConfig, MOCK_BACKEND_ID};
use crate::clock::{Clock, ManualClock};
use crate::coordinator::{Coordinator, CoordinatorConfig, CoordinatorError, CoordinatorKeys};
use crate::crypto::{generate_identity, IssuerKey, SigningSecret};
use crate::game::{expected_proxy_reward, RewardMatrix, SimpleScheme};
use crate::protocol::{AuditProofRequest, FetchStatus, QueryEnvelope, QueryId, RespondRequest, TokenResponse};
use crate::provenance::{LocalNotary, Notary};
use crate::proxy::{ClockPause, DriverWaits, Honesty, ProxyCore};
use crate::user::{choose_proxy, prepare_query, PendingQuery};

const SEC: u64 = 1000;
/// Virtual start time; any fixed epoch works.
const EPOCH_MS: u64 = 1_700_000_000_000;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("simulation failed: {0}")]
    Runtime(String),
}

/// Per-hop delay, lognormal around `median_ms`; a leg is `hops` hops.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HopLatency {
    pub median_ms: f64,
    pub sigma: f64,
    pub hops_per_leg: u32,
}

impl Default for HopLatency {
    fn default() -> Self {
        Self {
            median_ms: 1200.0,
            sigma: 0.5,
            hops_per_leg: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    pub seed: u64,
    pub num_users: usize,
    pub num_proxies: usize,
    /// Share of proxies (rounded) that fabricate answers.
    pub dishonest_fraction: f64,
    /// Chance a dishonest proxy answers honestly anyway.
    pub dishonest_p_h: f64,
    /// Whether a banned dishonest proxy comes back under a new pseudonym.
    pub dishonest_reregister: bool,
    pub reregister_delay_ms: u64,
    pub p_a: f64,
    /// Total user queries to issue.
    pub query_count: usize,
    /// Mean of the exponential pause between a user's answer and their
    /// next question.
    pub think_time_ms: f64,
    pub poll_interval_ms: u64,
    pub hop_latency: HopLatency,
    pub chatbot: MockChatbotConfig,
    pub waits: DriverWaits,
    /// Payoffs used to score proxies against the closed-form expectation.
    pub reward_x: f64,
    pub reward_z: f64,
    pub issuer_bits: usize,
    /// Stop even if queries remain once this much virtual time has passed.
    pub max_virtual_ms: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            num_users: 8,
            num_proxies: 4,
            dishonest_fraction: 0.25,
            dishonest_p_h: 0.0,
            dishonest_reregister: true,
            reregister_delay_ms: 60_000,
            p_a: 0.125,
            query_count: 4000,
            think_time_ms: 10_000.0,
            poll_interval_ms: 1_000,
            hop_latency: HopLatency::default(),
            chatbot: MockChatbotConfig::default(),
            waits: DriverWaits::default(),
            reward_x: -0.25,
            reward_z: 1.0,
            issuer_bits: crate::crypto::DEFAULT_MODULUS_BITS,
            max_virtual_ms: 30 * 86_400 * SEC,
        }
    }
}

impl SimConfig {
    pub fn num_dishonest(&self) -> usize {
        (self.num_proxies as f64 * self.dishonest_fraction).round() as usize
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |m: String| Err(SimError::Config(m));
        for (name, p) in [
            ("dishonest_fraction", self.dishonest_fraction),
            ("dishonest_p_h", self.dishonest_p_h),
            ("p_a", self.p_a),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return bad(format!("{name} = {p} outside [0, 1]"));
            }
        }
        if self.num_users == 0 || self.num_proxies == 0 {
            return bad("need at least one user and one proxy".into());
        }
        if !(self.hop_latency.median_ms > 0.0 && self.hop_latency.sigma >= 0.0) {
            return bad("hop latency median must be positive and sigma non-negative".into());
        }
        if !(self.chatbot.tokens_per_second > 0.0 && self.chatbot.chars_per_token > 0.0) {
            return bad("chatbot rates must be positive".into());
        }
        if self.chatbot.min_response_chars == 0 || self.chatbot.min_response_chars > self.chatbot.max_response_chars {
            return bad("response length range is empty".into());
        }
        if !(self.think_time_ms > 0.0) || self.poll_interval_ms == 0 {
            return bad("think time and poll interval must be positive".into());
        }
        if self.waits.max_attempts == 0 {
            return bad("waits.max_attempts must be at least 1".into());
        }
        if self.issuer_bits < 1024 {
            return bad("issuer_bits must be at least 1024".into());
        }
        SimpleScheme {
            x: self.reward_x,
            z: self.reward_z,
            p_a: self.p_a,
            p_h: 0.0,
        }
        .validate()
        .map_err(|e| SimError::Config(e.to_string()))
    }
}

/// Where one user query's time went. Seconds; the components add up to the
/// total exactly, since all three are derived from millisecond timestamps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencySample {
    pub query_id: QueryId,
    pub t_deliver_to_proxy: f64,
    pub t_chatbot_interaction: f64,
    pub t_deliver_to_user: f64,
    pub total: f64,
    pub response_length: usize,
}

pub const LATENCY_CSV_HEADER: &str =
    "query_id,t_deliver_to_proxy,t_chatbot_interaction,t_deliver_to_user,total,response_length";

impl LatencySample {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{:.3},{:.3},{:.3},{:.3},{}",
            self.query_id,
            self.t_deliver_to_proxy,
            self.t_chatbot_interaction,
            self.t_deliver_to_user,
            self.total,
            self.response_length
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencySummary {
    pub count: usize,
    pub mean_deliver_to_proxy: f64,
    pub mean_chatbot_interaction: f64,
    pub mean_deliver_to_user: f64,
    pub mean_total: f64,
    pub std_total: f64,
    /// Pearson correlation of total wait against response length.
    pub pearson_r: Option<f64>,
}

pub fn pearson(xs: &[f64], ys: &[f64]) -> Option<f64> {
    let n = xs.len();
    if n < 2 || n != ys.len() {
        return None;
    }
    let mx = xs.iter().sum::<f64>() / n as f64;
    let my = ys.iter().sum::<f64>() / n as f64;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx) * (x - mx);
        syy += (y - my) * (y - my);
    }
    (sxx > 0.0 && syy > 0.0).then(|| sxy / (sxx * syy).sqrt())
}

pub fn summarize_latency(samples: &[LatencySample]) -> LatencySummary {
    let n = samples.len();
    let mean = |f: fn(&LatencySample) -> f64| {
        if n == 0 {
            0.0
        } else {
            samples.iter().map(f).sum::<f64>() / n as f64
        }
    };
    let mean_total = mean(|s| s.total);
    let var = if n > 1 {
        samples.iter().map(|s| (s.total - mean_total).powi(2)).sum::<f64>() / (n - 1) as f64
    } else {
        0.0
    };
    let totals: Vec<f64> = samples.iter().map(|s| s.total).collect();
    let lengths: Vec<f64> = samples.iter().map(|s| s.response_length as f64).collect();
    LatencySummary {
        count: n,
        mean_deliver_to_proxy: mean(|s| s.t_deliver_to_proxy),
        mean_chatbot_interaction: mean(|s| s.t_chatbot_interaction),
        mean_deliver_to_user: mean(|s| s.t_deliver_to_user),
        mean_total,
        std_total: var.sqrt(),
        pearson_r: pearson(&totals, &lengths),
    }
}

/// One registered identity. A dishonest operator that re-registers after a
/// ban shows up as several of these.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ProxyOutcome {
    pub pseudonym: String,
    pub dishonest: bool,
    pub queries_accepted: u64,
    pub answered: u64,
    pub fabricated: u64,
    pub audits_passed: u64,
    pub audits_failed: u64,
    pub banned: bool,
    pub ecash_earned: u64,
    /// Fabricated answers to user queries that reached the user.
    pub uncaught_bad: u64,
}

pub const PROXY_CSV_HEADER: &str =
    "pseudonym,dishonest,queries_accepted,answered,fabricated,audits_passed,audits_failed,banned,ecash_earned,uncaught_bad";

impl ProxyOutcome {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{}",
            self.pseudonym,
            self.dishonest,
            self.queries_accepted,
            self.answered,
            self.fabricated,
            self.audits_passed,
            self.audits_failed,
            self.banned,
            self.ecash_earned,
            self.uncaught_bad
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PayoffEstimate {
    pub dishonest: bool,
    pub p_h: f64,
    pub trials: u64,
    pub audited: u64,
    pub mean: f64,
    pub stderr: f64,
    /// Closed-form expectation at the configured p_a.
    pub analytic: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimReport {
    pub seed: u64,
    pub virtual_ms: u64,
    pub queries_submitted: u64,
    pub responses: u64,
    pub failures: u64,
    pub in_flight: u64,
    pub resubmissions: u64,
    pub double_spend_rejections: u64,
    pub bootstrap_tokens: u64,
    pub rewards_issued: u64,
    pub audits_scheduled: u64,
    pub audits_passed: u64,
    pub audits_failed: u64,
    /// Payment tokens the coordinator has marked spent (user and audit).
    pub spent_tokens: u64,
    pub registrations: u64,
    pub proxies: Vec<ProxyOutcome>,
    /// Uncaught-bad counts of identities that were eventually banned.
    pub run_lengths: Vec<u64>,
    /// Runs still open when the simulation stopped.
    pub censored_runs: Vec<u64>,
    pub mean_run_length: Option<f64>,
    pub payoffs: Vec<PayoffEstimate>,
    pub latency_summary: LatencySummary,
    pub queries_per_proxy_minute: f64,
    #[serde(skip)]
    pub latency: Vec<LatencySample>,
}

impl SimReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn latency_csv(&self) -> String {
        csv(LATENCY_CSV_HEADER, self.latency.iter().map(LatencySample::csv_row))
    }

    pub fn proxies_csv(&self) -> String {
        csv(PROXY_CSV_HEADER, self.proxies.iter().map(ProxyOutcome::csv_row))
    }
}

fn csv(header: &str, rows: impl Iterator<Item = String>) -> String {
    let mut out = String::from(header);
    out.push('\n');
    for r in rows {
        out.push_str(&r);
        out.push('\n');
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Status {
    Registering,
    Active,
    Banned,
}

struct Operator {
    base: String,
    dishonest: bool,
    generation: u32,
    clock: Arc<ManualClock>,
    core: Option<ProxyCore>,
    token: Option<TokenResponse>,
    local: VecDeque<QueryEnvelope>,
    seen: BTreeSet<QueryId>,
    /// Proofs sent and not yet answered by the coordinator.
    proving: BTreeSet<QueryId>,
    status: Status,
    outcome: usize,
    seed: u64,
}

struct Trial {
    outcome: usize,
    audited: bool,
    honest: Option<bool>,
}

struct Flight {
    user: usize,
    started: u64,
    outcome: usize,
    handle_start: Option<u64>,
    chatbot_ms: u64,
    chars: usize,
    pending: PendingQuery,
}

enum Ev {
    UserNext(usize),
    Submit { user: usize, pending: Box<PendingQuery>, started: u64 },
    Register(usize),
    Complete(usize, Box<crate::protocol::CompleteRequest>),
    Poll(usize),
    Respond { op: usize, outcome: usize, req: Box<RespondRequest>, start: u64, chatbot_ms: u64, chars: usize, fabricated: bool },
    Proof { op: usize, outcome: usize, req: Box<AuditProofRequest> },
    Receive(QueryId),
}

struct Sim<'a> {
    cfg: &'a SimConfig,
    now: u64,
    seq: u64,
    queue: BinaryHeap<Reverse<(u64, u64)>>,
    events: BTreeMap<u64, Ev>,
    clock: Arc<ManualClock>,
    coordinator: Coordinator,
    notary: LocalNotary,
    rng: ChaCha20Rng,
    hop: LogNormal<f64>,
    think: Exp<f64>,
    ops: Vec<Operator>,
    outcomes: Vec<ProxyOutcome>,
    trials: BTreeMap<QueryId, Trial>,
    flights: BTreeMap<QueryId, Flight>,
    runs: Vec<u64>,
    issued: usize,
    /// Submissions on their way to the coordinator.
    in_transit: usize,
    report: SimReport,
}

fn rt<E: std::fmt::Display>(e: E) -> SimError {
    SimError::Runtime(e.to_string())
}

impl<'a> Sim<'a> {
    fn at(&mut self, t: u64, ev: Ev) {
        if matches!(ev, Ev::Submit { .. }) {
            self.in_transit += 1;
        }
        self.seq += 1;
        self.queue.push(Reverse((t, self.seq)));
        self.events.insert(self.seq, ev);
    }

    fn leg(&mut self) -> u64 {
        (0..self.cfg.hop_latency.hops_per_leg)
            .map(|_| self.hop.sample(&mut self.rng).round() as u64)
            .sum()
    }

    fn done(&self) -> bool {
        self.issued >= self.cfg.query_count && self.flights.is_empty() && self.in_transit == 0
    }

    fn honesty(&self, dishonest: bool) -> Honesty {
        if dishonest {
            Honesty::Strategic { p_h: self.cfg.dishonest_p_h }
        } else {
            Honesty::Honest
        }
    }

    fn new_core(&mut self, op: usize) -> ProxyCore {
        let (name, seed, dishonest) = {
            let o = &mut self.ops[op];
            o.generation += 1;
            let name = if o.generation == 1 {
                o.base.clone()
            } else {
                format!("{}-{}", o.base, o.generation)
            };
            (name, o.seed.wrapping_add(u64::from(o.generation) * 1_000_003), o.dishonest)
        };
        let clock = self.ops[op].clock.clone();
        let mut key_rng = ChaCha20Rng::seed_from_u64(seed);
        let chatbot = MockChatbot::new(
            MockChatbotConfig {
                seed,
                ..self.cfg.chatbot.clone()
            },
            clock,
        );
        ProxyCore::new(
            name,
            generate_identity(&mut key_rng),
            Box::new(chatbot),
            self.coordinator.issuer_public_key().clone(),
            self.cfg.waits,
            Some(seed ^ 0x5eed),
        )
        .with_honesty(self.honesty(dishonest))
    }

    /// Brings the operator's own clock up to the global time; its chatbot
    /// and driver run on it.
    fn sync_op_clock(&self, op: usize) {
        let c = &self.ops[op].clock;
        if c.now_ms() < self.now {
            c.set(self.now);
        }
    }

    fn op_elapsed(&self, op: usize) -> u64 {
        self.ops[op].clock.now_ms() - self.now
    }

    fn run(mut self) -> Result<SimReport, SimError> {
        for op in 0..self.ops.len() {
            self.at(EPOCH_MS + op as u64 * 100, Ev::Register(op));
        }
        for u in 0..self.cfg.num_users {
            self.at(EPOCH_MS + 60 * SEC + u as u64 * SEC, Ev::UserNext(u));
        }
        while let Some(Reverse((t, seq))) = self.queue.pop() {
            if self.done() || t - EPOCH_MS > self.cfg.max_virtual_ms {
                break;
            }
            self.now = t;
            self.clock.set(t);
            let ev = self.events.remove(&seq).expect("event stored");
            self.step(ev)?;
        }
        Ok(self.finish())
    }

    fn step(&mut self, ev: Ev) -> Result<(), SimError> {
        match ev {
            Ev::UserNext(u) => self.user_next(u),
            Ev::Submit { user, pending, started } => {
                self.in_transit -= 1;
                self.submit(user, *pending, started)
            }
            Ev::Register(op) => self.register(op),
            Ev::Complete(op, req) => self.complete(op, &req),
            Ev::Poll(op) => self.poll(op),
            Ev::Respond {
                op,
                outcome,
                req,
                start,
                chatbot_ms,
                chars,
                fabricated,
            } => self.respond(op, outcome, &req, start, chatbot_ms, chars, fabricated),
            Ev::Proof { op, outcome, req } => self.proof(op, outcome, &req),
            Ev::Receive(id) => self.receive(id),
        }
    }

    fn user_next(&mut self, u: usize) -> Result<(), SimError> {
        if self.issued >= self.cfg.query_count {
            return Ok(());
        }
        let listings = self.coordinator.list_proxies();
        let Some(proxy) = choose_proxy(&listings, MOCK_BACKEND_ID, &mut self.rng).cloned() else {
            self.at(self.now + 5 * SEC, Ev::UserNext(u));
            return Ok(());
        };
        self.issued += 1;
        let payment = self.coordinator.mint_bootstrap(1).map_err(rt)?.pop().expect("one token");
        let text = format!("Question {} from user {u}: explain something interesting.", self.issued);
        let pending = prepare_query(&proxy, &text, MOCK_BACKEND_ID, None, payment, &mut self.rng);
        let t = self.now + self.leg();
        self.at(t, Ev::Submit { user: u, pending: Box::new(pending), started: self.now });
        Ok(())
    }

    fn outcome_of(&self, pseudonym: &str) -> Option<usize> {
        self.ops
            .iter()
            .find(|o| o.core.as_ref().is_some_and(|c| c.pseudonym() == pseudonym))
            .map(|o| o.outcome)
    }

    fn submit(&mut self, user: usize, pending: PendingQuery, started: u64) -> Result<(), SimError> {
        let before = self.coordinator.counters().audits_scheduled;
        match self.coordinator.submit_query(&pending.envelope) {
            Ok(id) => {
                let pseudonym = pending.envelope.proxy_pseudonym.clone();
                let outcome = self.outcome_of(&pseudonym).ok_or_else(|| rt("unknown proxy accepted a query"))?;
                let audited = self.coordinator.counters().audits_scheduled > before;
                self.outcomes[outcome].queries_accepted += 1;
                self.report.queries_submitted += 1;
                self.trials.insert(
                    id,
                    Trial {
                        outcome,
                        audited,
                        honest: None,
                    },
                );
                self.flights.insert(
                    id,
                    Flight {
                        user,
                        started,
                        outcome,
                        handle_start: None,
                        chatbot_ms: 0,
                        chars: 0,
                        pending,
                    },
                );
            }
            Err(CoordinatorError::ProxyUnavailable | CoordinatorError::UnknownProxy) => {
                // the listing went stale in transit: pick again, same token
                self.report.resubmissions += 1;
                let listings = self.coordinator.list_proxies();
                let back = self.now + self.leg();
                match choose_proxy(&listings, MOCK_BACKEND_ID, &mut self.rng).cloned() {
                    Some(proxy) => {
                        let text = format!("Retried question from user {user}.");
                        let payment = pending.envelope.payment.clone();
                        let again = prepare_query(&proxy, &text, MOCK_BACKEND_ID, None, payment, &mut self.rng);
                        let t = back + self.leg();
                        self.at(t, Ev::Submit { user, pending: Box::new(again), started });
                    }
                    None => {
                        self.issued -= 1;
                        self.at(back, Ev::UserNext(user));
                    }
                }
            }
            Err(CoordinatorError::DoubleSpend) => {
                self.report.double_spend_rejections += 1;
                self.issued -= 1;
                self.at(self.now, Ev::UserNext(user));
            }
            Err(e) => return Err(rt(e)),
        }
        Ok(())
    }

    fn register(&mut self, op: usize) -> Result<(), SimError> {
        if let Some(old) = &self.ops[op].core {
            self.outcomes[self.ops[op].outcome].ecash_earned = old.wallet().len() as u64;
        }
        let core = self.new_core(op);
        self.outcomes.push(ProxyOutcome {
            pseudonym: core.pseudonym().to_string(),
            dishonest: self.ops[op].dishonest,
            ..ProxyOutcome::default()
        });
        let o = &mut self.ops[op];
        o.outcome = self.outcomes.len() - 1;
        o.core = Some(core);
        o.token = None;
        o.local.clear();
        o.proving.clear();
        o.status = Status::Registering;
        self.report.registrations += 1;

        let req = self.ops[op].core.as_ref().expect("just set").register_request();
        let set = self.coordinator.register_proxy(&req).map_err(rt)?;
        self.sync_op_clock(op);
        let mut pause = ClockPause(self.ops[op].clock.clone());
        let complete = self.ops[op]
            .core
            .as_mut()
            .expect("just set")
            .answer_challenges(&set, &self.notary, &mut pause)
            .map_err(rt)?;
        let t = self.now + self.op_elapsed(op) + self.leg();
        self.at(t, Ev::Complete(op, Box::new(complete)));
        Ok(())
    }

    fn complete(&mut self, op: usize, req: &crate::protocol::CompleteRequest) -> Result<(), SimError> {
        let outcome = self.coordinator.complete_registration(req).map_err(rt)?;
        if outcome.active {
            self.ops[op].status = Status::Active;
            self.at(self.now, Ev::Poll(op));
        } else {
            log::warn!("registration of {} rejected: {:?}", req.pseudonym, outcome.verdicts);
            self.ops[op].status = Status::Banned;
            self.at(self.now + self.cfg.reregister_delay_ms, Ev::Register(op));
        }
        Ok(())
    }

    fn token(&mut self, op: usize) -> Result<Option<String>, SimError> {
        let o = &self.ops[op];
        if let Some(t) = &o.token {
            if t.expires_at > self.now + 300 * SEC {
                return Ok(Some(t.token.clone()));
            }
        }
        let core = o.core.as_ref().expect("registered");
        let nonce = match self.coordinator.issue_auth_nonce(core.pseudonym()) {
            Ok(n) => n,
            Err(CoordinatorError::NotActive) => return Ok(None),
            Err(e) => return Err(rt(e)),
        };
        let t = self.coordinator.authenticate(&core.auth_request(&nonce.nonce)).map_err(rt)?;
        let token = t.token.clone();
        self.ops[op].token = Some(t);
        Ok(Some(token))
    }

    /// The operator notices its ban on its next contact.
    fn on_banned(&mut self, op: usize) {
        let o = &mut self.ops[op];
        if o.status == Status::Banned {
            return;
        }
        o.status = Status::Banned;
        let out = &mut self.outcomes[o.outcome];
        out.banned = true;
        if o.dishonest && self.cfg.dishonest_reregister {
            self.at(self.now + self.cfg.reregister_delay_ms, Ev::Register(op));
        }
    }

    fn poll(&mut self, op: usize) -> Result<(), SimError> {
        if self.ops[op].status != Status::Active {
            return Ok(());
        }
        let Some(token) = self.token(op)? else {
            self.on_banned(op);
            return Ok(());
        };
        let poll = match self.coordinator.poll_queries(&token) {
            Ok(p) => p,
            Err(CoordinatorError::AuthRejected) => {
                self.notice_failures(op);
                self.on_banned(op);
                return Ok(());
            }
            Err(e) => return Err(rt(e)),
        };
        self.sync_op_clock(op);
        let outcome = self.ops[op].outcome;
        let mut pause = ClockPause(self.ops[op].clock.clone());
        {
            let o = &mut self.ops[op];
            for env in poll.queries {
                if o.seen.insert(env.query_id) {
                    o.local.push_back(env);
                }
            }
        }
        if let Some(id) = poll.proof_requests.iter().find(|id| !self.ops[op].proving.contains(id)) {
            self.ops[op].proving.insert(*id);
            let req = self.ops[op]
                .core
                .as_mut()
                .expect("active")
                .prove(id, &self.notary, &mut pause)
                .map_err(rt)?;
            let busy = self.op_elapsed(op);
            let t = self.now + busy + self.leg();
            self.at(t, Ev::Proof { op, outcome, req: Box::new(req) });
            self.at(self.now + busy, Ev::Poll(op));
            return Ok(());
        }
        let Some(env) = self.ops[op].local.pop_front() else {
            self.at(self.now + self.cfg.poll_interval_ms, Ev::Poll(op));
            return Ok(());
        };
        let handled = self.ops[op]
            .core
            .as_mut()
            .expect("active")
            .handle_envelope(&env, &mut pause)
            .map_err(rt)?;
        let busy = self.op_elapsed(op);
        let t = self.now + busy + self.leg();
        self.at(
            t,
            Ev::Respond {
                op,
                outcome,
                req: Box::new(handled.respond),
                start: self.now,
                chatbot_ms: handled.elapsed_ms,
                chars: handled.response_chars,
                fabricated: handled.fabricated,
            },
        );
        self.at(self.now + busy, Ev::Poll(op));
        Ok(())
    }

    #[allow(clippy::too_many_arguments)]
    fn respond(
        &mut self,
        op: usize,
        outcome: usize,
        req: &RespondRequest,
        start: u64,
        chatbot_ms: u64,
        chars: usize,
        fabricated: bool,
    ) -> Result<(), SimError> {
        if self.ops[op].outcome != outcome {
            return Ok(()); // sent by an identity that has since been replaced
        }
        let Some(token) = self.token(op)? else {
            self.notice_failures(op);
            self.on_banned(op);
            return Ok(());
        };
        match self.coordinator.submit_response(&token, req) {
            Ok(()) => {}
            Err(CoordinatorError::Forbidden | CoordinatorError::AlreadyAnswered | CoordinatorError::AuthRejected) => {
                return Ok(())
            }
            Err(e) => return Err(rt(e)),
        }
        let out = &mut self.outcomes[outcome];
        out.answered += 1;
        if fabricated {
            out.fabricated += 1;
        }
        if let Some(f) = self.flights.get_mut(&req.query_id) {
            f.handle_start = Some(start);
            f.chatbot_ms = chatbot_ms;
            f.chars = chars;
            if fabricated {
                self.outcomes[outcome].uncaught_bad += 1;
            }
            if let Some(trial) = self.trials.get_mut(&req.query_id) {
                if !trial.audited {
                    trial.honest = Some(!fabricated);
                }
            }
            self.at(self.now, Ev::Receive(req.query_id));
        }
        Ok(())
    }

    fn proof(&mut self, op: usize, outcome: usize, req: &AuditProofRequest) -> Result<(), SimError> {
        self.ops[op].proving.remove(&req.query_id);
        if self.ops[op].outcome != outcome {
            return Ok(());
        }
        let Some(token) = self.token(op)? else {
            self.notice_failures(op);
            self.on_banned(op);
            return Ok(());
        };
        let pseudonym = self.ops[op].core.as_ref().expect("active").pseudonym().to_string();
        let trigger = self.coordinator.pending_audit(&pseudonym).and_then(|a| a.trigger);
        let resp = match self.coordinator.verify_audit(&token, req) {
            Ok(r) => r,
            Err(CoordinatorError::NoPendingAudit | CoordinatorError::AuthRejected) => return Ok(()),
            Err(e) => return Err(rt(e)),
        };
        let passed = self.ops[op]
            .core
            .as_mut()
            .expect("active")
            .accept_verdict(&req.query_id, &resp)
            .map_err(rt)?;
        if let Some(trigger) = trigger {
            if let Some(trial) = self.trials.get_mut(&trigger) {
                trial.honest = Some(passed);
            }
        }
        let out = &mut self.outcomes[outcome];
        if passed {
            out.audits_passed += 1;
        } else {
            out.audits_failed += 1;
            self.runs.push(out.uncaught_bad);
            self.notice_failures(op);
            self.on_banned(op);
        }
        Ok(())
    }

    /// Users of a banned proxy see their open queries fail.
    fn notice_failures(&mut self, op: usize) {
        let outcome = self.ops[op].outcome;
        let ids: Vec<QueryId> = self
            .flights
            .iter()
            .filter(|(_, f)| f.outcome == outcome && f.handle_start.is_none())
            .map(|(id, _)| *id)
            .collect();
        for id in ids {
            if let Ok(r) = self.coordinator.fetch_response(&id) {
                if r.status == FetchStatus::Failed {
                    let t = self.now + self.leg();
                    self.at(t, Ev::Receive(id));
                }
            }
        }
    }

    fn receive(&mut self, id: QueryId) -> Result<(), SimError> {
        let Some(f) = self.flights.remove(&id) else { return Ok(()) };
        let fetched = self.coordinator.fetch_response(&id).map_err(rt)?;
        match f.pending.open(&fetched) {
            Ok(Some(_)) => {
                self.report.responses += 1;
                let start = f.handle_start.expect("answered");
                let to_proxy = start - f.started;
                let total = self.now - f.started;
                let to_user = total - to_proxy - f.chatbot_ms;
                let s = |ms: u64| ms as f64 / 1000.0;
                self.report.latency.push(LatencySample {
                    query_id: id,
                    t_deliver_to_proxy: s(to_proxy),
                    t_chatbot_interaction: s(f.chatbot_ms),
                    t_deliver_to_user: s(to_user),
                    total: s(total),
                    response_length: f.chars,
                });
            }
            Ok(None) => {
                self.flights.insert(id, f);
                self.at(self.now + SEC, Ev::Receive(id));
                return Ok(());
            }
            Err(_) => self.report.failures += 1,
        }
        let think = self.think.sample(&mut self.rng).round() as u64;
        self.at(self.now + think, Ev::UserNext(f.user));
        Ok(())
    }

    fn finish(mut self) -> SimReport {
        for o in &self.ops {
            if let Some(core) = &o.core {
                self.outcomes[o.outcome].ecash_earned = core.wallet().len() as u64;
            }
        }
        let c = self.coordinator.counters();
        let mut r = self.report;
        r.virtual_ms = self.now.saturating_sub(EPOCH_MS);
        r.in_flight = self.flights.len() as u64;
        r.bootstrap_tokens = c.bootstrap_minted;
        r.rewards_issued = c.rewards_issued;
        r.audits_scheduled = c.audits_scheduled;
        r.audits_passed = c.audits_passed;
        r.audits_failed = c.audits_failed;
        r.spent_tokens = self.coordinator.spent_count() as u64;
        r.censored_runs = self
            .ops
            .iter()
            .filter(|o| o.dishonest && o.status != Status::Banned)
            .map(|o| self.outcomes[o.outcome].uncaught_bad)
            .collect();
        r.mean_run_length = (!self.runs.is_empty()).then(|| self.runs.iter().sum::<u64>() as f64 / self.runs.len() as f64);
        r.run_lengths = self.runs;

        let m = RewardMatrix::from_simple(self.cfg.reward_x, self.cfg.reward_z, 0.0);
        for dishonest in [false, true] {
            let p_h = if dishonest { self.cfg.dishonest_p_h } else { 1.0 };
            let scores: Vec<(bool, f64)> = self
                .trials
                .values()
                .filter(|t| self.outcomes[t.outcome].dishonest == dishonest)
                .filter_map(|t| t.honest.map(|h| (t.audited, m.proxy(t.audited, h))))
                .collect();
            if scores.is_empty() {
                continue;
            }
            let n = scores.len() as f64;
            let mean = scores.iter().map(|s| s.1).sum::<f64>() / n;
            let var = scores.iter().map(|s| (s.1 - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
            r.payoffs.push(PayoffEstimate {
                dishonest,
                p_h,
                trials: scores.len() as u64,
                audited: scores.iter().filter(|s| s.0).count() as u64,
                mean,
                stderr: (var / n).sqrt(),
                analytic: expected_proxy_reward(&SimpleScheme {
                    x: self.cfg.reward_x,
                    z: self.cfg.reward_z,
                    p_a: self.cfg.p_a,
                    p_h,
                }),
            });
        }

        r.latency_summary = summarize_latency(&r.latency);
        let minutes = r.virtual_ms as f64 / 60_000.0;
        r.queries_per_proxy_minute = if minutes > 0.0 {
            r.responses as f64 / minutes / self.cfg.num_proxies as f64
        } else {
            0.0
        };
        r.proxies = self.outcomes;
        r
    }
}

pub fn run_protocol_sim(cfg: &SimConfig) -> Result<SimReport, SimError> {
    cfg.validate()?;
    let mut rng = ChaCha20Rng::seed_from_u64(cfg.seed);
    let issuer = IssuerKey::generate(&mut rng, cfg.issuer_bits).map_err(rt)?;
    run_with_issuer(cfg, issuer, rng)
}

/// Like [`run_protocol_sim`] but with a caller-supplied issuer key, which
/// is by far the slowest thing to generate.
pub fn run_protocol_sim_with_issuer(cfg: &SimConfig, issuer: IssuerKey) -> Result<SimReport, SimError> {
    cfg.validate()?;
    run_with_issuer(cfg, issuer, ChaCha20Rng::seed_from_u64(cfg.seed))
}

fn run_with_issuer(cfg: &SimConfig, issuer: IssuerKey, mut rng: ChaCha20Rng) -> Result<SimReport, SimError> {
    let clock = Arc::new(ManualClock::new(EPOCH_MS));
    let notary = LocalNotary::new(SigningSecret::generate(&mut rng), Some(rng.gen()));
    let keys = CoordinatorKeys {
        issuer,
        bearer: SigningSecret::generate(&mut rng),
        notary: notary.public_key(),
    };
    let coordinator = Coordinator::new(
        CoordinatorConfig {
            p_a: cfg.p_a,
            seed: Some(rng.gen()),
            ..CoordinatorConfig::default()
        },
        keys,
        clock.clone(),
    )
    .map_err(|e| SimError::Config(e.to_string()))?;
    let dishonest = cfg.num_dishonest();
    let ops = (0..cfg.num_proxies)
        .map(|i| {
            let bad = i >= cfg.num_proxies - dishonest;
            Operator {
                base: format!("{}-{i}", if bad { "dishonest" } else { "honest" }),
                dishonest: bad,
                generation: 0,
                clock: Arc::new(ManualClock::new(EPOCH_MS)),
                core: None,
                token: None,
                local: VecDeque::new(),
                seen: BTreeSet::new(),
                proving: BTreeSet::new(),
                status: Status::Registering,
                outcome: 0,
                seed: rng.gen(),
            }
        })
        .collect();
    let hop = LogNormal::new(cfg.hop_latency.median_ms.ln(), cfg.hop_latency.sigma).map_err(rt)?;
    let think = Exp::new(1.0 / cfg.think_time_ms).map_err(rt)?;
    let sim = Sim {
        cfg,
        now: EPOCH_MS,
        seq: 0,
        queue: BinaryHeap::new(),
        events: BTreeMap::new(),
        clock,
        coordinator,
        notary,
        rng,
        hop,
        think,
        ops,
        outcomes: Vec::new(),
        trials: BTreeMap::new(),
        flights: BTreeMap::new(),
        runs: Vec::new(),
        issued: 0,
        in_transit: 0,
        report: SimReport {
            seed: cfg.seed,
            virtual_ms: 0,
            queries_submitted: 0,
            responses: 0,
            failures: 0,
            in_flight: 0,
            resubmissions: 0,
            double_spend_rejections: 0,
            bootstrap_tokens: 0,
            rewards_issued: 0,
            audits_scheduled: 0,
            audits_passed: 0,
            audits_failed: 0,
            spent_tokens: 0,
            registrations: 0,
            proxies: Vec::new(),
            run_lengths: Vec::new(),
            censored_runs: Vec::new(),
            mean_run_length: None,
            payoffs: Vec::new(),
            latency_summary: summarize_latency(&[]),
            queries_per_proxy_minute: 0.0,
            latency: Vec::new(),
        },
    };
    sim.run()
}

/// Sequential queries from one user through one honest proxy, with no
/// audits; isolates where the time goes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LatencyConfig {
    pub seed: u64,
    pub queries: usize,
    pub hop_latency: HopLatency,
    pub chatbot: MockChatbotConfig,
    pub waits: DriverWaits,
    pub think_time_ms: f64,
    pub poll_interval_ms: u64,
    pub issuer_bits: usize,
}

impl Default for LatencyConfig {
    fn default() -> Self {
        let s = SimConfig::default();
        Self {
            seed: 7,
            queries: 200,
            hop_latency: s.hop_latency,
            chatbot: s.chatbot,
            waits: s.waits,
            think_time_ms: 5_000.0,
            poll_interval_ms: s.poll_interval_ms,
            issuer_bits: s.issuer_bits,
        }
    }
}

impl LatencyConfig {
    pub fn as_sim(&self) -> SimConfig {
        SimConfig {
            seed: self.seed,
            num_users: 1,
            num_proxies: 1,
            dishonest_fraction: 0.0,
            p_a: 0.0,
            query_count: self.queries,
            think_time_ms: self.think_time_ms,
            poll_interval_ms: self.poll_interval_ms,
            hop_latency: self.hop_latency,
            chatbot: self.chatbot.clone(),
            waits: self.waits,
            issuer_bits: self.issuer_bits,
            ..SimConfig::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyReport {
    pub summary: LatencySummary,
    pub queries_per_minute: f64,
    #[serde(skip)]
    pub samples: Vec<LatencySample>,
}

impl LatencyReport {
    pub fn csv(&self) -> String {
        csv(LATENCY_CSV_HEADER, self.samples.iter().map(LatencySample::csv_row))
    }
}

pub fn run_latency_experiment(cfg: &LatencyConfig) -> Result<LatencyReport, SimError> {
    latency_from(run_protocol_sim(&cfg.as_sim())?)
}

pub fn run_latency_experiment_with_issuer(cfg: &LatencyConfig, issuer: IssuerKey) -> Result<LatencyReport, SimError> {
    latency_from(run_protocol_sim_with_issuer(&cfg.as_sim(), issuer)?)
}

fn latency_from(r: SimReport) -> Result<LatencyReport, SimError> {
    Ok(LatencyReport {
        summary: r.latency_summary,
        queries_per_minute: r.queries_per_proxy_minute,
        samples: r.latency,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pearson_matches_hand_computation() {
        let r = pearson(&[1.0, 2.0, 3.0, 4.0], &[2.0, 4.0, 5.0, 9.0]).unwrap();
        // sxy = 11, sxx = 5, syy = 26
        assert!((r - 11.0 / 130f64.sqrt()).abs() < 1e-12);
        assert_eq!(pearson(&[1.0, 1.0], &[2.0, 3.0]), None);
    }

    #[test]
    fn invalid_configs_are_rejected() {
        for cfg in [
            SimConfig { p_a: 1.5, ..SimConfig::default() },
            SimConfig { num_users: 0, ..SimConfig::default() },
            SimConfig {
                chatbot: MockChatbotConfig {
                    tokens_per_second: 0.0,
                    ..MockChatbotConfig::default()
                },
                ..SimConfig::default()
            },
        ] {
            assert!(matches!(run_protocol_sim(&cfg), Err(SimError::Config(_))));
        }
    }
}
