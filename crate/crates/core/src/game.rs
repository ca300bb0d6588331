//! The proxy-integrity inspection game: closed forms, equilibrium and a
//! Monte-Carlo cross-check.
//!
//! Rows are coordinator actions (audit / no audit), columns proxy actions
//! (honest / dishonest). Fixed corners: proxy gets −1 when caught, +1 when
//! dishonest and unaudited; coordinator gets +1 for a catch, −1 for a miss
//! and 0 for an unaudited honest answer.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GameError {
    #[error("{name} = {value} outside {range}")]
    OutOfRange {
        name: &'static str,
        value: f64,
        range: &'static str,
    },
    #[error("{0}")]
    Undefined(&'static str),
}

fn check(name: &'static str, value: f64, range: &'static str, ok: bool) -> Result<(), GameError> {
    if ok && value.is_finite() {
        Ok(())
    } else {
        Err(GameError::OutOfRange { name, value, range })
    }
}

fn check_prob(name: &'static str, p: f64) -> Result<(), GameError> {
    check(name, p, "[0, 1]", (0.0..=1.0).contains(&p))
}

/// Single-proxy scheme: `x` is the cost of an honest unaudited answer, `z`
/// the reward for passing an audit.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimpleScheme {
    pub x: f64,
    pub z: f64,
    pub p_a: f64,
    pub p_h: f64,
}

impl SimpleScheme {
    pub fn validate(&self) -> Result<(), GameError> {
        check("x", self.x, "(-1, 0]", self.x > -1.0 && self.x <= 0.0)?;
        check("z", self.z, "[0, inf)", self.z >= 0.0)?;
        check_prob("p_a", self.p_a)?;
        check_prob("p_h", self.p_h)
    }
}

pub fn expected_proxy_reward(s: &SimpleScheme) -> f64 {
    s.p_h * (s.p_a * (s.z - s.x + 2.0) + s.x - 1.0) + (1.0 - 2.0 * s.p_a)
}

/// Smallest audit reward above which honesty is the proxy's best response.
pub fn honesty_threshold(x: f64, p_a: f64) -> Result<f64, GameError> {
    check("x", x, "(-1, 0]", x > -1.0 && x <= 0.0)?;
    if p_a == 0.0 {
        return Err(GameError::Undefined("no reward makes honesty pay when nothing is audited"));
    }
    check_prob("p_a", p_a)?;
    Ok(x - 2.0 + (1.0 - x) / p_a)
}

/// Expected number of bad answers an always-dishonest proxy gets away with
/// before its first audit: the fixed point of `E = (1 - p_a)(1 + E)`.
pub fn expected_uncaught_bad(p_a: f64) -> Result<f64, GameError> {
    if p_a == 0.0 {
        return Err(GameError::Undefined("a never-audited proxy is never caught"));
    }
    check_prob("p_a", p_a)?;
    Ok((1.0 - p_a) / p_a)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BestResponse {
    pub p_h: f64,
    /// Every grid point scored within 1e-12 of the best.
    pub tie: bool,
}

pub fn best_response_honesty(x: f64, z: f64, p_a: f64, grid: usize) -> Result<BestResponse, GameError> {
    if grid < 101 {
        return Err(GameError::OutOfRange {
            name: "grid",
            value: grid as f64,
            range: "[101, inf)",
        });
    }
    let mut best = (f64::NEG_INFINITY, 0.0);
    let mut worst = f64::INFINITY;
    for i in 0..grid {
        let p_h = i as f64 / (grid - 1) as f64;
        let s = SimpleScheme { x, z, p_a, p_h };
        s.validate()?;
        let v = expected_proxy_reward(&s);
        if v > best.0 {
            best = (v, p_h);
        }
        worst = worst.min(v);
    }
    Ok(BestResponse {
        p_h: best.1,
        tie: best.0 - worst <= 1e-12,
    })
}

/// Generic payoffs; the remaining entries are the fixed corners above.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardMatrix {
    pub r_p_ah: f64,
    pub r_p_nh: f64,
    pub r_c_ah: f64,
}

impl RewardMatrix {
    /// The single-proxy scheme seen as a full game; the coordinator side of
    /// an honest audit costs `r_c_ah`.
    pub fn from_simple(x: f64, z: f64, r_c_ah: f64) -> Self {
        Self {
            r_p_ah: z,
            r_p_nh: x,
            r_c_ah,
        }
    }

    pub fn validate(&self) -> Result<(), GameError> {
        check("r_p_ah", self.r_p_ah, "[0, inf)", self.r_p_ah >= 0.0)?;
        check("r_p_nh", self.r_p_nh, "(-1, 0]", self.r_p_nh > -1.0 && self.r_p_nh <= 0.0)?;
        check("r_c_ah", self.r_c_ah, "(-1, 0]", self.r_c_ah > -1.0 && self.r_c_ah <= 0.0)
    }

    pub fn proxy(&self, audit: bool, honest: bool) -> f64 {
        match (audit, honest) {
            (true, true) => self.r_p_ah,
            (true, false) => -1.0,
            (false, true) => self.r_p_nh,
            (false, false) => 1.0,
        }
    }

    pub fn coordinator(&self, audit: bool, honest: bool) -> f64 {
        match (audit, honest) {
            (true, true) => self.r_c_ah,
            (true, false) => 1.0,
            (false, true) => 0.0,
            (false, false) => -1.0,
        }
    }

    pub fn proxy_expected(&self, p_a: f64, p_h: f64) -> f64 {
        p_a * (p_h * self.r_p_ah - (1.0 - p_h)) + (1.0 - p_a) * (p_h * self.r_p_nh + (1.0 - p_h))
    }

    pub fn coordinator_expected(&self, p_a: f64, p_h: f64) -> f64 {
        p_a * (p_h * self.r_c_ah + (1.0 - p_h)) - (1.0 - p_a) * (1.0 - p_h)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MixedStrategyNE {
    pub p_a_star: f64,
    pub p_h_star: f64,
    pub e_r_p: f64,
    pub e_r_c: f64,
    /// `r_c_ah = 0`: the equilibrium degenerates to always-honest, and
    /// (audit, honest) is a weak pure equilibrium.
    pub boundary: bool,
}

/// Every pure profile has a strict unilateral improvement when `r_c_ah < 0`;
/// at `r_c_ah = 0` the coordinator is indifferent against an honest proxy.
fn pure_profiles_cycle(m: &RewardMatrix) -> bool {
    [(true, true), (true, false), (false, true), (false, false)]
        .into_iter()
        .all(|(a, h)| m.proxy(a, !h) > m.proxy(a, h) || m.coordinator(!a, h) > m.coordinator(a, h))
}

pub fn mixed_strategy_ne(m: &RewardMatrix) -> Result<MixedStrategyNE, GameError> {
    m.validate()?;
    let boundary = !pure_profiles_cycle(m);
    debug_assert_eq!(boundary, m.r_c_ah == 0.0);
    // proxy indifferent: p_a r_ah + (1 - p_a) r_nh = 1 - 2 p_a
    let p_a_star = (1.0 - m.r_p_nh) / (m.r_p_ah - m.r_p_nh + 2.0);
    // coordinator indifferent: p_h r_c + (1 - p_h) = p_h - 1
    let p_h_star = 2.0 / (2.0 - m.r_c_ah);
    Ok(MixedStrategyNE {
        p_a_star,
        p_h_star,
        e_r_p: m.proxy_expected(p_a_star, p_h_star),
        e_r_c: m.r_c_ah / (2.0 - m.r_c_ah),
        boundary,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScenarioRow {
    pub label: &'static str,
    /// The supplied parameters with this scenario's zeroed entries applied.
    pub matrix: RewardMatrix,
    /// Whether the supplied parameters themselves fall in this scenario.
    pub applies: bool,
    pub p_a_star: f64,
    pub p_h_star: f64,
    pub e_r_p: f64,
    pub e_r_c: f64,
}

/// The five payoff regimes, each evaluated through its own simplified
/// closed form rather than the general solver.
pub fn scenario_table(m: &RewardMatrix) -> Result<Vec<ScenarioRow>, GameError> {
    m.validate()?;
    let (ah, nh, c) = (m.r_p_ah, m.r_p_nh, m.r_c_ah);
    let p_h = |c: f64| 2.0 / (2.0 - c);
    let e_c = |c: f64| c / (2.0 - c);
    let row = |label, matrix: RewardMatrix, applies, p_a_star, e_r_p| ScenarioRow {
        label,
        matrix,
        applies,
        p_a_star,
        p_h_star: p_h(matrix.r_c_ah),
        e_r_p,
        e_r_c: e_c(matrix.r_c_ah),
    };
    Ok(vec![
        row(
            "r_p_ah = r_p_nh = r_c_ah = 0",
            RewardMatrix::from_simple(0.0, 0.0, 0.0),
            ah == 0.0 && nh == 0.0 && c == 0.0,
            0.5,
            0.0,
        ),
        row(
            "r_p_ah = r_p_nh = 0, r_c_ah < 0",
            RewardMatrix::from_simple(0.0, 0.0, c),
            ah == 0.0 && nh == 0.0 && c < 0.0,
            0.5,
            0.0,
        ),
        row(
            "r_p_ah > 0, r_p_nh = 0",
            RewardMatrix::from_simple(0.0, ah, c),
            ah > 0.0 && nh == 0.0,
            1.0 / (ah + 2.0),
            ah / (ah + 2.0),
        ),
        row(
            "r_p_ah = 0, r_p_nh < 0",
            RewardMatrix::from_simple(nh, 0.0, c),
            ah == 0.0 && nh < 0.0,
            (1.0 - nh) / (2.0 - nh),
            nh / (2.0 - nh),
        ),
        row(
            "r_p_ah > 0, r_p_nh < 0",
            *m,
            ah > 0.0 && nh < 0.0,
            (1.0 - nh) / (ah - nh + 2.0),
            (ah + nh) / (ah - nh + 2.0),
        ),
    ])
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Horizon {
    /// Play this many queries.
    Trials(u64),
    /// Play until the proxy has been caught this many times.
    Runs(u64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GameSimConfig {
    pub matrix: RewardMatrix,
    pub p_a: f64,
    pub p_h: f64,
    pub horizon: Horizon,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GameSimReport {
    pub trials: u64,
    pub mean_proxy_payoff: f64,
    pub proxy_payoff_stderr: f64,
    pub mean_coordinator_payoff: f64,
    pub coordinator_payoff_stderr: f64,
    /// Completed runs; a run ends when a dishonest answer is audited.
    pub runs: u64,
    pub mean_run_length: f64,
    pub run_length_stderr: f64,
    pub bans: u64,
}

pub const GAME_CSV_HEADER: &str = "seed,p_a,p_h,r_p_ah,r_p_nh,r_c_ah,trials,mean_proxy_payoff,proxy_payoff_stderr,mean_coordinator_payoff,coordinator_payoff_stderr,runs,mean_run_length,run_length_stderr,bans";

impl GameSimReport {
    pub fn csv_row(&self, cfg: &GameSimConfig) -> String {
        let m = cfg.matrix;
        format!(
            "{},{},{},{},{},{},{},{:.6},{:.6},{:.6},{:.6},{},{:.6},{:.6},{}",
            cfg.seed,
            cfg.p_a,
            cfg.p_h,
            m.r_p_ah,
            m.r_p_nh,
            m.r_c_ah,
            self.trials,
            self.mean_proxy_payoff,
            self.proxy_payoff_stderr,
            self.mean_coordinator_payoff,
            self.coordinator_payoff_stderr,
            self.runs,
            self.mean_run_length,
            self.run_length_stderr,
            self.bans
        )
    }
}

#[derive(Default, Clone, Copy)]
struct Moments {
    n: u64,
    sum: f64,
    sum_sq: f64,
}

impl Moments {
    fn push(&mut self, v: f64) {
        self.n += 1;
        self.sum += v;
        self.sum_sq += v * v;
    }

    fn merge(self, o: Moments) -> Moments {
        Moments {
            n: self.n + o.n,
            sum: self.sum + o.sum,
            sum_sq: self.sum_sq + o.sum_sq,
        }
    }

    fn mean(&self) -> f64 {
        if self.n == 0 {
            return f64::NAN;
        }
        self.sum / self.n as f64
    }

    fn stderr(&self) -> f64 {
        if self.n < 2 {
            return f64::NAN;
        }
        let n = self.n as f64;
        let var = (self.sum_sq - self.sum * self.sum / n) / (n - 1.0);
        (var.max(0.0) / n).sqrt()
    }
}

#[derive(Default, Clone, Copy)]
struct Shard {
    proxy: Moments,
    coord: Moments,
    runs: Moments,
}

const SHARDS: u64 = 16;

fn play_shard(cfg: &GameSimConfig, shard: u64, quota: u64) -> Shard {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(shard);
    let mut out = Shard::default();
    let mut run = 0u64;
    let done = |out: &Shard| match cfg.horizon {
        Horizon::Trials(_) => out.proxy.n >= quota,
        Horizon::Runs(_) => out.runs.n >= quota,
    };
    while !done(&out) {
        let audit = rng.gen_bool(cfg.p_a);
        let honest = rng.gen_bool(cfg.p_h);
        out.proxy.push(cfg.matrix.proxy(audit, honest));
        out.coord.push(cfg.matrix.coordinator(audit, honest));
        if !honest {
            if audit {
                out.runs.push(run as f64);
                run = 0;
            } else {
                run += 1;
            }
        }
    }
    out
}

/// Deterministic for a given config regardless of thread count: the work is
/// split into a fixed number of independently seeded streams whose results
/// are merged in order.
pub fn simulate_game(cfg: &GameSimConfig) -> Result<GameSimReport, GameError> {
    check_prob("p_a", cfg.p_a)?;
    check_prob("p_h", cfg.p_h)?;
    let total = match cfg.horizon {
        Horizon::Trials(n) | Horizon::Runs(n) => n,
    };
    if total == 0 {
        return Err(GameError::Undefined("horizon must be at least 1"));
    }
    if matches!(cfg.horizon, Horizon::Runs(_)) && (cfg.p_a == 0.0 || cfg.p_h == 1.0) {
        return Err(GameError::Undefined("the proxy is never caught, runs never end"));
    }
    let shards: Vec<Shard> = (0..SHARDS)
        .into_par_iter()
        .map(|i| {
            let quota = total / SHARDS + u64::from(i < total % SHARDS);
            play_shard(cfg, i, quota)
        })
        .collect();
    let all = shards.into_iter().fold(Shard::default(), |a, s| Shard {
        proxy: a.proxy.merge(s.proxy),
        coord: a.coord.merge(s.coord),
        runs: a.runs.merge(s.runs),
    });
    Ok(GameSimReport {
        trials: all.proxy.n,
        mean_proxy_payoff: all.proxy.mean(),
        proxy_payoff_stderr: all.proxy.stderr(),
        mean_coordinator_payoff: all.coord.mean(),
        coordinator_payoff_stderr: all.coord.stderr(),
        runs: all.runs.n,
        mean_run_length: all.runs.mean(),
        run_length_stderr: all.runs.stderr(),
        bans: all.runs.n,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn closed_form_examples() {
        let s = |p_a, p_h, x, z| SimpleScheme { x, z, p_a, p_h };
        assert_eq!(expected_proxy_reward(&s(0.125, 0.0, 0.0, 0.0)), 0.75);
        assert_eq!(expected_proxy_reward(&s(0.3, 1.0, 0.0, 0.0)), 0.0);
        assert_eq!(expected_proxy_reward(&s(0.0, 0.0, -0.4, 3.0)), 1.0);
        assert_eq!(honesty_threshold(0.0, 0.125).unwrap(), 6.0);
        assert_eq!(honesty_threshold(0.0, 1.0).unwrap(), -1.0);
        assert_eq!(honesty_threshold(-0.5, 0.125).unwrap(), 9.5);
        assert!(honesty_threshold(0.0, 0.0).is_err());
        assert_eq!(expected_uncaught_bad(0.125).unwrap(), 7.0);
        assert_eq!(expected_uncaught_bad(1.0).unwrap(), 0.0);
        assert_eq!(expected_uncaught_bad(0.5).unwrap(), 1.0);
        assert!(expected_uncaught_bad(0.0).is_err());
    }

    #[test]
    fn best_response_examples() {
        assert_eq!(best_response_honesty(0.0, 0.0, 0.125, 101).unwrap().p_h, 0.0);
        assert_eq!(best_response_honesty(0.0, 7.0, 0.125, 101).unwrap().p_h, 1.0);
        assert!(best_response_honesty(0.0, 6.0, 0.125, 101).unwrap().tie);
        assert!(best_response_honesty(0.0, 6.0, 0.125, 100).is_err());
    }

    #[test]
    fn equilibrium_examples() {
        let ne = mixed_strategy_ne(&RewardMatrix::from_simple(0.0, 2.0, 0.0)).unwrap();
        assert_eq!((ne.p_a_star, ne.p_h_star, ne.e_r_p, ne.e_r_c), (0.25, 1.0, 0.5, 0.0));
        assert!(ne.boundary);
        let ne = mixed_strategy_ne(&RewardMatrix::from_simple(-0.5, 0.0, -0.5)).unwrap();
        assert!((ne.p_a_star - 0.6).abs() < 1e-12);
        assert!((ne.p_h_star - 0.8).abs() < 1e-12);
        assert!((ne.e_r_p + 0.2).abs() < 1e-12);
        assert!((ne.e_r_c + 0.2).abs() < 1e-12);
        assert!(!ne.boundary);
        assert!(mixed_strategy_ne(&RewardMatrix::from_simple(0.0, 0.0, -2.0)).is_err());
    }

    #[test]
    fn scenario_rows_agree_with_solver() {
        let m = RewardMatrix::from_simple(-0.3, 1.5, -0.4);
        for row in scenario_table(&m).unwrap() {
            let ne = mixed_strategy_ne(&row.matrix).unwrap();
            assert!((ne.p_a_star - row.p_a_star).abs() < 1e-12, "{}", row.label);
            assert!((ne.e_r_p - row.e_r_p).abs() < 1e-12, "{}", row.label);
        }
    }

    #[test]
    fn simulation_is_deterministic() {
        let cfg = GameSimConfig {
            matrix: RewardMatrix::from_simple(0.0, 0.0, 0.0),
            p_a: 0.125,
            p_h: 0.3,
            horizon: Horizon::Trials(10_000),
            seed: 5,
        };
        let a = simulate_game(&cfg).unwrap();
        assert_eq!(a, simulate_game(&cfg).unwrap());
        assert_eq!(a.trials, 10_000);
        let runs = GameSimConfig { horizon: Horizon::Runs(500), ..cfg };
        assert_eq!(simulate_game(&runs).unwrap().runs, 500);
        let never = GameSimConfig { p_h: 1.0, ..runs };
        assert!(simulate_game(&never).is_err());
    }
}
