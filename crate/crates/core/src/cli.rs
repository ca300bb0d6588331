//! Command-line front end. Exit codes: 0 success, 1 runtime failure,
//! 2 bad usage or configuration.

use std::io::Write;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::Duration;

use clap::{Args, Parser, Subcommand};
use rand::rngs::OsRng;
use serde::Deserialize;

use crate::api::CoordinatorApi;
use crate::chatbot::MockChatbot;
use crate::clock::SystemClock;
use crate::config::{
    load_or_create_identity, load_or_create_issuer, load_or_create_signing, load_toml, ConfigError,
    CoordinatorServiceConfig, NotaryServiceConfig, UserConfig,
};
use crate::coordinator::{Coordinator, CoordinatorKeys};
use crate::crypto::{ECashToken, SigningPublicKey};
use crate::game::{mixed_strategy_ne, scenario_table, simulate_game, GameSimConfig, Horizon, RewardMatrix, GAME_CSV_HEADER};
use crate::http::{coordinator_router, notary_router, serve_until_interrupt, HttpCoordinator, HttpNotary};
use crate::provenance::{LocalNotary, Notary};
use crate::proxy::{Agent, AgentConfig, ProxyCore, SleepPause, Wallet};
use crate::sim::{run_latency_experiment, run_protocol_sim, LatencyConfig, SimConfig, SimError};
use crate::user::{ask_blocking, choose_proxy, prepare_query};

#[derive(Debug, Parser)]
#[command(name = "veil", version, about = "Anonymous chatbot access through volunteer proxies")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Debug, Subcommand)]
enum Cmd {
    /// The relay and directory service.
    #[command(subcommand)]
    Coordinator(ServeCmd),
    /// The transcript notary service.
    #[command(subcommand)]
    Notary(ServeCmd),
    /// The volunteer proxy agent.
    #[command(subcommand)]
    Proxy(ProxyCmd),
    /// The user client.
    #[command(subcommand)]
    User(UserCmd),
    /// Discrete-event simulations.
    #[command(subcommand)]
    Sim(SimCmd),
    /// The audit game: equilibrium, scenario table, Monte-Carlo check.
    #[command(subcommand)]
    Game(GameCmd),
}

#[derive(Debug, Subcommand)]
enum ServeCmd {
    Serve(Common),
}

#[derive(Debug, Subcommand)]
enum ProxyCmd {
    /// Register if needed, then answer queries until interrupted.
    Run(ProxyRun),
}

#[derive(Debug, Subcommand)]
enum UserCmd {
    /// Ask one question through a proxy and print the answer.
    Ask(UserAsk),
}

#[derive(Debug, Subcommand)]
enum SimCmd {
    /// Users, proxies and the coordinator on a virtual clock.
    Protocol(SimArgs),
    /// One honest proxy, one user: where the waiting time goes.
    Latency(SimArgs),
}

#[derive(Debug, Subcommand)]
enum GameCmd {
    /// The mixed-strategy equilibrium.
    Solve(GameParams),
    /// The five payoff regimes evaluated at the given rewards.
    Table(GameTable),
    /// Monte-Carlo play; prints CSV.
    Simulate(GameSimulate),
}

#[derive(Debug, Args)]
struct Common {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Args)]
struct ProxyRun {
    #[command(flatten)]
    common: Common,
    /// Stop after this many seconds instead of waiting for Ctrl-C.
    #[arg(long)]
    duration_secs: Option<u64>,
}

#[derive(Debug, Args)]
struct UserAsk {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Send to this proxy instead of a random one.
    #[arg(long)]
    proxy: Option<String>,
    question: String,
}

#[derive(Debug, Args)]
struct SimArgs {
    #[command(flatten)]
    common: Common,
    /// Write report files here instead of printing the report.
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct GameParams {
    /// TOML with any of r_p_ah, r_p_nh, r_c_ah, p_a, p_h, trials, runs, seed.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, allow_negative_numbers = true)]
    r_p_ah: Option<f64>,
    #[arg(long, allow_negative_numbers = true)]
    r_p_nh: Option<f64>,
    #[arg(long, allow_negative_numbers = true)]
    r_c_ah: Option<f64>,
    #[arg(long)]
    json: bool,
}

#[derive(Debug, Args)]
struct GameTable {
    #[command(flatten)]
    params: GameParams,
}

#[derive(Debug, Args)]
struct GameSimulate {
    #[command(flatten)]
    params: GameParams,
    /// Audit probability; the equilibrium value when omitted.
    #[arg(long, allow_negative_numbers = true)]
    p_a: Option<f64>,
    /// Honesty probability; the equilibrium value when omitted.
    #[arg(long, allow_negative_numbers = true)]
    p_h: Option<f64>,
    #[arg(long, conflicts_with = "runs")]
    trials: Option<u64>,
    /// Play until this many dishonest answers have been caught.
    #[arg(long)]
    runs: Option<u64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct GameFile {
    r_p_ah: Option<f64>,
    r_p_nh: Option<f64>,
    r_c_ah: Option<f64>,
    p_a: Option<f64>,
    p_h: Option<f64>,
    trials: Option<u64>,
    runs: Option<u64>,
    seed: Option<u64>,
}

#[derive(Debug)]
enum CliError {
    Usage(String),
    Runtime(String),
}

impl CliError {
    fn code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Usage(e.to_string())
    }
}

impl From<SimError> for CliError {
    fn from(e: SimError) -> Self {
        match e {
            SimError::Config(_) => CliError::Usage(e.to_string()),
            SimError::Runtime(_) => CliError::Runtime(e.to_string()),
        }
    }
}

fn runtime(e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(e.to_string())
}

fn usage(e: impl std::fmt::Display) -> CliError {
    CliError::Usage(e.to_string())
}

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    // long-running services narrate; batch commands only warn
    let level = match cli.cmd {
        Cmd::Coordinator(_) | Cmd::Notary(_) | Cmd::Proxy(_) => "info",
        _ => "warn",
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).try_init();
    match dispatch(cli.cmd) {
        Ok(()) => 0,
        Err(e) => {
            match &e {
                CliError::Usage(m) => eprintln!("error: {m}"),
                CliError::Runtime(m) => eprintln!("failed: {m}"),
            }
            e.code()
        }
    }
}

fn dispatch(cmd: Cmd) -> Result<(), CliError> {
    match cmd {
        Cmd::Coordinator(ServeCmd::Serve(c)) => coordinator_serve(c),
        Cmd::Notary(ServeCmd::Serve(c)) => notary_serve(c),
        Cmd::Proxy(ProxyCmd::Run(r)) => proxy_run(r),
        Cmd::User(UserCmd::Ask(a)) => user_ask(a),
        Cmd::Sim(SimCmd::Protocol(a)) => sim_protocol(a),
        Cmd::Sim(SimCmd::Latency(a)) => sim_latency(a),
        Cmd::Game(GameCmd::Solve(p)) => game_solve(p),
        Cmd::Game(GameCmd::Table(t)) => game_table(t.params),
        Cmd::Game(GameCmd::Simulate(s)) => game_simulate(s),
    }
}

fn out(text: &str) -> Result<(), CliError> {
    let mut stdout = std::io::stdout().lock();
    stdout.write_all(text.as_bytes()).and_then(|_| stdout.flush()).map_err(runtime)
}

fn listen_addr(text: &str) -> Result<SocketAddr, CliError> {
    text.parse().map_err(|e| usage(format!("listen address {text:?}: {e}")))
}

fn tokio_runtime() -> Result<tokio::runtime::Runtime, CliError> {
    tokio::runtime::Builder::new_multi_thread().enable_all().build().map_err(runtime)
}

fn coordinator_serve(args: Common) -> Result<(), CliError> {
    let mut cfg: CoordinatorServiceConfig = load_toml(args.config.as_deref())?;
    if args.seed.is_some() {
        cfg.protocol.seed = args.seed;
    }
    cfg.validate()?;
    let addr = listen_addr(&cfg.listen)?;
    let mut rng = OsRng;
    let issuer = load_or_create_issuer(&cfg.issuer_key_path, cfg.issuer_bits, &mut rng)?;
    let bearer = load_or_create_signing(&cfg.bearer_key_path, &mut rng)?;
    let notary = match &cfg.notary_public_key {
        Some(k) => SigningPublicKey::from_base64(k).map_err(|e| usage(format!("notary_public_key: {e}")))?,
        None => HttpNotary::connect(&cfg.notary_url)
            .map_err(|e| runtime(format!("fetching notary key from {}: {e}", cfg.notary_url)))?
            .public_key(),
    };
    let keys = CoordinatorKeys { issuer, bearer, notary };
    let mut coordinator = Coordinator::new(cfg.protocol.clone(), keys, Arc::new(SystemClock)).map_err(usage)?;
    if let Some(path) = &cfg.store_path {
        coordinator = coordinator.with_store(path).map_err(runtime)?;
    }
    if let Some(path) = cfg.bootstrap_wallet_path.as_deref().filter(|p| !p.exists()) {
        let tokens = coordinator.mint_bootstrap(cfg.protocol.bootstrap_tokens).map_err(runtime)?;
        let lines: String = tokens.iter().map(|t| t.to_base64() + "\n").collect();
        crate::config::write_secret(path, &lines).map_err(runtime)?;
        log::info!("wrote {} bootstrap tokens to {}", tokens.len(), path.display());
    }
    let coordinator = Arc::new(coordinator);
    let purge_every = Duration::from_secs(cfg.purge_interval_secs);
    let rt = tokio_runtime()?;
    rt.block_on(async move {
        let listener = tokio::net::TcpListener::bind(addr).await.map_err(runtime)?;
        log::info!("coordinator listening on http://{}", listener.local_addr().map_err(runtime)?);
        let purger = Arc::clone(&coordinator);
        tokio::spawn(async move {
            let mut tick = tokio::time::interval(purge_every);
            loop {
                tick.tick().await;
                let c = Arc::clone(&purger);
                match tokio::task::spawn_blocking(move || c.purge_expired()).await {
                    Ok(Ok(n)) if n > 0 => log::info!("purged {n} expired queries"),
                    Ok(Err(e)) => log::warn!("purge failed: {e}"),
                    _ => {}
                }
            }
        });
        serve_until_interrupt(listener, coordinator_router(coordinator)).await.map_err(runtime)
    })
}

fn notary_serve(args: Common) -> Result<(), CliError> {
    let cfg: NotaryServiceConfig = load_toml(args.config.as_deref())?;
    let addr = listen_addr(&cfg.listen)?;
    let key = load_or_create_signing(&cfg.key_path, &mut OsRng)?;
    let notary: Arc<dyn Notary> = Arc::new(LocalNotary::new(key, args.seed).with_max_len(cfg.max_transcript_bytes));
    log::info!("notary key {}", notary.public_key().to_base64());
    tokio_runtime()?.block_on(async move {
        let listener = tokio::net::TcpListener::bind(addr).await.map_err(runtime)?;
        log::info!("notary listening on http://{}", listener.local_addr().map_err(runtime)?);
        serve_until_interrupt(listener, notary_router(notary)).await.map_err(runtime)
    })
}

/// Sets the returned flag on Ctrl-C or after `limit`.
fn stop_flag(limit: Option<Duration>) -> Arc<AtomicBool> {
    let stop = Arc::new(AtomicBool::new(false));
    let s = Arc::clone(&stop);
    std::thread::spawn(move || {
        let Ok(rt) = tokio::runtime::Builder::new_current_thread().enable_all().build() else { return };
        rt.block_on(async {
            match limit {
                Some(d) => {
                    tokio::select! {
                        _ = tokio::signal::ctrl_c() => {}
                        _ = tokio::time::sleep(d) => {}
                    }
                }
                None => {
                    let _ = tokio::signal::ctrl_c().await;
                }
            }
        });
        s.store(true, Ordering::Relaxed);
    });
    stop
}

fn proxy_run(args: ProxyRun) -> Result<(), CliError> {
    let cfg: AgentConfig = load_toml(args.common.config.as_deref())?;
    cfg.validate().map_err(usage)?;
    let api = Arc::new(HttpCoordinator::new(&cfg.coordinator_url));
    let notary = Arc::new(HttpNotary::connect(&cfg.notary_url).map_err(runtime)?);
    let issuer = api.issuer_key().map_err(runtime)?;
    let identity = load_or_create_identity(&cfg.identity_path, &mut OsRng)?;
    let wallet = Wallet::load(&cfg.wallet_path, &issuer).map_err(runtime)?;
    let mut chatbot = cfg.chatbot.clone();
    if let Some(seed) = args.common.seed {
        chatbot.seed = seed;
    }
    let backend = MockChatbot::new(chatbot, Arc::new(SystemClock));
    let core = ProxyCore::new(cfg.pseudonym.clone(), identity, Box::new(backend), issuer, cfg.waits, args.common.seed)
        .with_wallet(wallet);
    let mut agent = Agent::new(core, api, notary, Arc::new(SystemClock), Box::new(SleepPause))
        .with_limit(cfg.hourly_limit)
        .with_wallet_path(cfg.wallet_path.clone())
        .with_refresh_margin_secs(cfg.token_refresh_margin_secs);
    agent.ensure_registered().map_err(runtime)?;
    let stop = stop_flag(args.duration_secs.map(Duration::from_secs));
    agent.run(&stop, cfg.poll_interval_ms, cfg.max_backoff_ms).map_err(runtime)?;
    log::info!("stopping; wallet holds {} tokens", agent.core().wallet().len());
    Ok(())
}

/// Removes and returns the first token of a one-per-line wallet file.
fn take_token(path: &Path) -> Result<ECashToken, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| runtime(format!("{}: {e}", path.display())))?;
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let first = lines.next().ok_or_else(|| runtime(format!("{} holds no tokens", path.display())))?;
    let token = ECashToken::from_base64(first.trim()).map_err(|e| runtime(format!("{}: {e}", path.display())))?;
    let rest: String = lines.map(|l| l.to_string() + "\n").collect();
    crate::config::write_secret(path, &rest).map_err(runtime)?;
    Ok(token)
}

fn user_ask(args: UserAsk) -> Result<(), CliError> {
    let cfg: UserConfig = load_toml(args.config.as_deref())?;
    let api = HttpCoordinator::new(&cfg.coordinator_url);
    let listings = api.list_proxies().map_err(runtime)?;
    let proxy = match &args.proxy {
        Some(name) => listings.iter().find(|l| &l.pseudonym == name),
        None => choose_proxy(&listings, &cfg.backend, &mut OsRng),
    }
    .ok_or_else(|| runtime("no suitable proxy is listed"))?;
    let payment = take_token(&cfg.wallet_path)?;
    let pending = prepare_query(proxy, &args.question, &cfg.backend, None, payment, &mut OsRng);
    eprintln!("query {} via {}", pending.query_id(), proxy.pseudonym);
    let answer = ask_blocking(&api, &pending, cfg.poll_interval_ms, cfg.timeout_ms).map_err(runtime)?;
    out(&format!("{}\n", answer.text))
}

fn write_file(dir: &Path, name: &str, contents: &str) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(runtime)?;
    std::fs::write(dir.join(name), contents).map_err(|e| runtime(format!("{}: {e}", dir.join(name).display())))
}

fn sim_protocol(args: SimArgs) -> Result<(), CliError> {
    let mut cfg: SimConfig = load_toml(args.common.config.as_deref())?;
    if let Some(seed) = args.common.seed {
        cfg.seed = seed;
    }
    let report = run_protocol_sim(&cfg)?;
    let json = report.to_json() + "\n";
    match &args.out_dir {
        Some(dir) => {
            write_file(dir, "report.json", &json)?;
            write_file(dir, "latency.csv", &report.latency_csv())?;
            write_file(dir, "proxies.csv", &report.proxies_csv())
        }
        None => out(&json),
    }
}

fn sim_latency(args: SimArgs) -> Result<(), CliError> {
    let mut cfg: LatencyConfig = load_toml(args.common.config.as_deref())?;
    if let Some(seed) = args.common.seed {
        cfg.seed = seed;
    }
    let report = run_latency_experiment(&cfg)?;
    let json = serde_json::to_string_pretty(&report).map_err(runtime)? + "\n";
    if let Some(dir) = &args.out_dir {
        write_file(dir, "latency.csv", &report.csv())?;
        write_file(dir, "summary.json", &json)?;
    }
    out(&json)
}

fn game_inputs(p: &GameParams) -> Result<(RewardMatrix, GameFile), CliError> {
    let file = match &p.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| usage(format!("{}: {e}", path.display())))?;
            toml::from_str::<GameFile>(&text).map_err(|e| usage(format!("{}: {e}", path.display())))?
        }
        None => GameFile::default(),
    };
    let pick = |flag: Option<f64>, file: Option<f64>, name: &str| {
        flag.or(file).ok_or_else(|| usage(format!("--{} is required", name.replace('_', "-"))))
    };
    let m = RewardMatrix {
        r_p_ah: pick(p.r_p_ah, file.r_p_ah, "r_p_ah")?,
        r_p_nh: pick(p.r_p_nh, file.r_p_nh, "r_p_nh")?,
        r_c_ah: pick(p.r_c_ah, file.r_c_ah, "r_c_ah")?,
    };
    m.validate().map_err(usage)?;
    Ok((m, file))
}

fn game_solve(p: GameParams) -> Result<(), CliError> {
    let (m, _) = game_inputs(&p)?;
    let ne = mixed_strategy_ne(&m).map_err(usage)?;
    if p.json {
        return out(&(serde_json::to_string_pretty(&ne).map_err(runtime)? + "\n"));
    }
    let mut text = format!(
        "(p_a*, p_h*, E[R_p], E[R_c]) = ({:.6}, {:.6}, {:.6}, {:.6})\n",
        ne.p_a_star, ne.p_h_star, ne.e_r_p, ne.e_r_c
    );
    if ne.boundary {
        text.push_str("r_c_ah = 0: (audit, honest) is also a weak pure equilibrium\n");
    }
    out(&text)
}

fn game_table(p: GameParams) -> Result<(), CliError> {
    let (m, _) = game_inputs(&p)?;
    let rows = scenario_table(&m).map_err(usage)?;
    if p.json {
        return out(&(serde_json::to_string_pretty(&rows).map_err(runtime)? + "\n"));
    }
    let mut text = format!(
        "{:<34} {:>7} {:>10} {:>10} {:>10} {:>10}\n",
        "scenario", "applies", "p_a*", "p_h*", "E[R_p]", "E[R_c]"
    );
    for r in rows {
        text.push_str(&format!(
            "{:<34} {:>7} {:>10.6} {:>10.6} {:>10.6} {:>10.6}\n",
            r.label,
            if r.applies { "*" } else { "" },
            r.p_a_star,
            r.p_h_star,
            r.e_r_p,
            r.e_r_c
        ));
    }
    out(&text)
}

fn game_simulate(s: GameSimulate) -> Result<(), CliError> {
    let (m, file) = game_inputs(&s.params)?;
    let ne = mixed_strategy_ne(&m).map_err(usage)?;
    let horizon = match (s.trials, s.runs) {
        (Some(t), _) => Horizon::Trials(t),
        (None, Some(r)) => Horizon::Runs(r),
        (None, None) => match (file.trials, file.runs) {
            (Some(t), _) => Horizon::Trials(t),
            (None, Some(r)) => Horizon::Runs(r),
            (None, None) => Horizon::Trials(100_000),
        },
    };
    let cfg = GameSimConfig {
        matrix: m,
        p_a: s.p_a.or(file.p_a).unwrap_or(ne.p_a_star),
        p_h: s.p_h.or(file.p_h).unwrap_or(ne.p_h_star),
        horizon,
        seed: s.seed.or(file.seed).unwrap_or(0),
    };
    let report = simulate_game(&cfg).map_err(usage)?;
    let csv = format!("{GAME_CSV_HEADER}\n{}\n", report.csv_row(&cfg));
    match &s.out {
        Some(path) => std::fs::write(path, csv).map_err(|e| runtime(format!("{}: {e}", path.display()))),
        None => out(&csv),
    }
}
