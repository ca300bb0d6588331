//! One PASS/FAIL line per acceptance criterion. Runs without the libtest
//! harness so the lines always print; a failing criterion does not abort the
//! others and the process still exits 0, leaving the verdicts to the reader.

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::{Arc, Barrier};
use std::time::{Duration, Instant};

use common::{audit_fixture, leaked_window, scannable_proof_bytes, world, FIXTURE_NOW_SECS};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use veil::clock::Clock;
use veil::coordinator::{CoordinatorConfig, CoordinatorError};
use veil::game::{
    best_response_honesty, expected_uncaught_bad, honesty_threshold, mixed_strategy_ne, scenario_table,
    simulate_game, GameSimConfig, Horizon, RewardMatrix,
};
use veil::provenance::{build_proof, plan_reveal, verify_proof, FailureReason, RedactedProof, ResponseSchema, RevealRanges};
use veil::proxy::ClockPause;
use veil::sim::{run_latency_experiment, run_protocol_sim, LatencyConfig, SimConfig};

type Outcome = Result<String, String>;

fn ensure(ok: bool, msg: impl Into<String>) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn within(limit: Duration, start: Instant) -> Result<(), String> {
    let took = start.elapsed();
    ensure(took < limit, format!("took {took:.2?}, limit {limit:?}"))
}

fn scenario_table_golden() -> Outcome {
    let start = Instant::now();
    let ne = mixed_strategy_ne(&RewardMatrix::from_simple(0.0, 0.0, 0.0)).map_err(|e| e.to_string())?;
    ensure(
        (ne.p_a_star, ne.p_h_star, ne.e_r_p, ne.e_r_c) == (0.5, 1.0, 0.0, 0.0),
        format!("first row {ne:?}"),
    )?;
    // the four parameterized rows, their closed forms written out directly
    let forms: [(&str, fn(f64, f64, f64) -> [f64; 4]); 4] = [
        ("r_p_ah = r_p_nh = 0, r_c_ah < 0", |_, _, c| [0.5, 2.0 / (2.0 - c), 0.0, c / (2.0 - c)]),
        ("r_p_ah > 0, r_p_nh = 0", |a, _, c| [1.0 / (a + 2.0), 2.0 / (2.0 - c), a / (a + 2.0), c / (2.0 - c)]),
        ("r_p_ah = 0, r_p_nh < 0", |_, n, c| {
            [(1.0 - n) / (2.0 - n), 2.0 / (2.0 - c), n / (2.0 - n), c / (2.0 - c)]
        }),
        ("r_p_ah > 0, r_p_nh < 0", |a, n, c| {
            let d = a - n + 2.0;
            [(1.0 - n) / d, 2.0 / (2.0 - c), (a + n) / d, c / (2.0 - c)]
        }),
    ];
    let mut rng = ChaCha20Rng::seed_from_u64(1);
    let mut checked = 0;
    for (i, (label, form)) in forms.iter().enumerate() {
        for _ in 0..5 {
            let a = if i % 2 == 1 { rng.gen_range(0.05..5.0) } else { 0.0 };
            let n = if i >= 2 { -rng.gen_range(0.05..0.95) } else { 0.0 };
            let c = -rng.gen_range(0.05..0.95);
            let m = RewardMatrix { r_p_ah: a, r_p_nh: n, r_c_ah: c };
            let ne = mixed_strategy_ne(&m).map_err(|e| e.to_string())?;
            let row = scenario_table(&m).map_err(|e| e.to_string())?.into_iter().find(|r| r.applies);
            let row = row.ok_or(format!("no scenario applies to {m:?}"))?;
            ensure(row.label == *label, format!("{m:?} classified as {}", row.label))?;
            let want = form(a, n, c);
            for got in [
                [ne.p_a_star, ne.p_h_star, ne.e_r_p, ne.e_r_c],
                [row.p_a_star, row.p_h_star, row.e_r_p, row.e_r_c],
            ] {
                let err = got.iter().zip(want).map(|(g, w)| (g - w).abs()).fold(0.0, f64::max);
                ensure(err <= 1e-12, format!("{label} at {m:?}: error {err:e}"))?;
            }
            checked += 1;
        }
    }
    within(Duration::from_secs(1), start)?;
    Ok(format!("first row exact; {checked} parameterized points within 1e-12"))
}

fn uncaught_bad() -> Outcome {
    let start = Instant::now();
    let e = expected_uncaught_bad(0.125).map_err(|e| e.to_string())?;
    ensure(e == 7.0, format!("E_B = {e}"))?;
    let r = simulate_game(&GameSimConfig {
        matrix: RewardMatrix::from_simple(0.0, 0.0, 0.0),
        p_a: 0.125,
        p_h: 0.0,
        horizon: Horizon::Runs(100_000),
        seed: 7,
    })
    .map_err(|e| e.to_string())?;
    ensure(r.runs == 100_000, format!("{} runs", r.runs))?;
    ensure(
        (6.75..=7.25).contains(&r.mean_run_length),
        format!("mean run length {:.4}", r.mean_run_length),
    )?;
    within(Duration::from_secs(10), start)?;
    Ok(format!("E_B = 7; simulated mean {:.4} ± {:.4} over 10^5 runs", r.mean_run_length, r.run_length_stderr))
}

fn honesty_threshold_property() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha20Rng::seed_from_u64(3);
    for _ in 0..1_000 {
        let x = -rng.gen_range(0.0..0.99);
        // p_a < 1/2 keeps the threshold above the 1e-6 margin, so both
        // sides are admissible (non-negative) rewards
        let p_a = rng.gen_range(0.01..0.49);
        let z0 = honesty_threshold(x, p_a).map_err(|e| e.to_string())?;
        let above = best_response_honesty(x, z0 + 1e-6, p_a, 101).map_err(|e| e.to_string())?;
        let below = best_response_honesty(x, z0 - 1e-6, p_a, 101).map_err(|e| e.to_string())?;
        ensure(
            above.p_h == 1.0 && below.p_h == 0.0,
            format!("x={x}, p_a={p_a}, z0={z0}: above {}, below {}", above.p_h, below.p_h),
        )?;
    }
    within(Duration::from_secs(5), start)?;
    Ok("10^3 draws: honest just above the threshold, dishonest just below".into())
}

fn equilibrium_bounds() -> Outcome {
    let mut rng = ChaCha20Rng::seed_from_u64(4);
    for _ in 0..10_000 {
        let m = RewardMatrix {
            r_p_ah: rng.gen_range(0.0..10.0),
            r_p_nh: -rng.gen_range(0.0..0.999),
            r_c_ah: -rng.gen_range(0.0..0.999),
        };
        let ne = mixed_strategy_ne(&m).map_err(|e| e.to_string())?;
        ensure(2.0 / 3.0 < ne.p_h_star && ne.p_h_star <= 1.0, format!("p_h* {} at {m:?}", ne.p_h_star))?;
        ensure(-1.0 / 3.0 < ne.e_r_c && ne.e_r_c <= 0.0, format!("E[R_C] {} at {m:?}", ne.e_r_c))?;
        let proxy_gap = m.proxy_expected(ne.p_a_star, 1.0) - m.proxy_expected(ne.p_a_star, 0.0);
        let coord_gap = m.coordinator_expected(1.0, ne.p_h_star) - m.coordinator_expected(0.0, ne.p_h_star);
        ensure(
            proxy_gap.abs() <= 1e-12 && coord_gap.abs() <= 1e-12,
            format!("indifference gaps {proxy_gap:e}, {coord_gap:e} at {m:?}"),
        )?;
    }
    Ok("10^4 matrices within bounds, indifference to 1e-12".into())
}

fn protocol_sim() -> Outcome {
    let start = Instant::now();
    let cfg = SimConfig::default();
    ensure(
        (cfg.seed, cfg.num_proxies, cfg.num_dishonest(), cfg.p_a, cfg.query_count) == (7, 4, 1, 0.125, 4000),
        "default config is not the acceptance scenario",
    )?;
    let r = run_protocol_sim(&cfg).map_err(|e| e.to_string())?;
    let wall = start.elapsed();
    let cheats: Vec<_> = r.proxies.iter().filter(|p| p.dishonest).collect();
    ensure(cheats.iter().any(|p| p.banned), "dishonest proxy never banned")?;
    for p in r.proxies.iter().filter(|p| !p.dishonest) {
        ensure(p.ecash_earned == p.audits_passed, format!("{} earned {} for {} audits", p.pseudonym, p.ecash_earned, p.audits_passed))?;
    }
    ensure(r.double_spend_rejections == 0, format!("{} double spends", r.double_spend_rejections))?;
    ensure(wall < Duration::from_secs(60), format!("took {wall:.2?}"))?;

    let n = r.run_lengths.len() as f64;
    let mean = r.run_lengths.iter().sum::<u64>() as f64 / n;
    let var = r.run_lengths.iter().map(|&x| (x as f64 - mean).powi(2)).sum::<f64>() / (n - 1.0);
    let se = (var / n).sqrt();
    let bans = cheats.iter().filter(|p| p.banned).count();
    let summary = format!(
        "{bans} bans, honest e-cash = audits passed, 0 double spends; uncaught-bad mean {mean:.3} over {} banned identities \
         (sample sd {:.2}, se {se:.2}, E = 7 is {:.2} se away)",
        r.run_lengths.len(),
        var.sqrt(),
        (mean - 7.0) / se
    );
    ensure((6.5..=7.5).contains(&mean), format!("{summary}; mean outside [6.5, 7.5]"))?;
    Ok(summary)
}

fn double_spend_race() -> Outcome {
    let w = world(CoordinatorConfig {
        p_a: 0.0,
        seed: Some(1),
        ..CoordinatorConfig::default()
    });
    let mut p = w.proxy_core("p", 1);
    w.activate(&mut p);
    let mut rng = ChaCha20Rng::seed_from_u64(6);
    for rep in 0..1_000 {
        if rep % 100 == 0 {
            // stay listed
            w.coordinator.poll_queries(&w.token(&p)).map_err(|e| e.to_string())?;
        }
        let a = w.user_query("p", &format!("A{rep}"), &mut rng);
        let mut b = w.user_query("p", &format!("B{rep}"), &mut rng);
        b.envelope.payment = a.envelope.payment.clone();
        let gate = Arc::new(Barrier::new(2));
        let handles: Vec<_> = [a.envelope, b.envelope]
            .into_iter()
            .map(|env| {
                let (c, gate) = (w.coordinator.clone(), gate.clone());
                std::thread::spawn(move || {
                    gate.wait();
                    c.submit_query(&env)
                })
            })
            .collect();
        let results: Vec<_> = handles.into_iter().map(|h| h.join().unwrap()).collect();
        let accepted = results.iter().filter(|r| r.is_ok()).count();
        let rejected = results.iter().filter(|r| **r == Err(CoordinatorError::DoubleSpend)).count();
        ensure(accepted == 1 && rejected == 1, format!("rep {rep}: {results:?}"))?;
    }
    Ok("1000 races, exactly one acceptance each".into())
}

fn provenance_suite() -> Outcome {
    let f = audit_fixture(11);
    ensure(f.check(&f.proof, FIXTURE_NOW_SECS).passed, "honest proof rejected")?;
    let bytes = f.proof.to_bytes();
    let mut rng = ChaCha20Rng::seed_from_u64(12);
    let mut parsed = 0;
    for _ in 0..10_000 {
        let mut m = bytes.clone();
        let i = rng.gen_range(0..m.len());
        m[i] ^= 1 << rng.gen_range(0..8);
        if let Ok(p) = RedactedProof::from_bytes(&m) {
            parsed += 1;
            ensure(!f.check(&p, FIXTURE_NOW_SECS).passed, format!("mutation at byte {i} accepted"))?;
        }
    }

    for seed in 0..16 {
        let f = audit_fixture(seed);
        let windows = f.secret_windows();
        if let Some(w) = leaked_window(&windows, &scannable_proof_bytes(&f.proof)) {
            return Err(format!("seed {seed}: redacted bytes {:?} visible", String::from_utf8_lossy(&w)));
        }
    }

    let mut forged = f.response.clone();
    forged.replace_range(0..5, "XXXXX");
    let substituted = veil::provenance::check_audit_response(
        &f.proof,
        &f.notary,
        &f.query,
        &forged,
        &ResponseSchema::mock_v1(),
        veil::provenance::DEFAULT_MAX_AGE_SECS,
        FIXTURE_NOW_SECS,
    );
    ensure(substituted.reason == Some(FailureReason::ResponseMismatch), format!("substitution: {substituted:?}"))?;

    let t = &f.transcript;
    let plan = plan_reveal(t, &ResponseSchema::mock_v1(), &f.query).map_err(|e| e.to_string())?;
    let at = t.response.windows(f.response.len()).position(|w| w == f.response.as_bytes()).unwrap();
    let ranges = RevealRanges {
        request: plan.request,
        response: vec![0..at + 160, at + 208..t.response.len()],
    };
    let holed = build_proof(t, &f.notarization.salts, &f.notarization.commitment, &ranges).map_err(|e| e.to_string())?;
    ensure(verify_proof(&holed, &f.notary).is_ok(), "holed proof fails signature checks")?;
    let hole = f.check(&holed, FIXTURE_NOW_SECS);
    ensure(hole.reason == Some(FailureReason::StructureViolation), format!("content redaction: {hole:?}"))?;

    let stale = f.check(&f.proof, FIXTURE_NOW_SECS + 601);
    ensure(stale.reason == Some(FailureReason::StaleTimestamp), format!("stale: {stale:?}"))?;
    Ok(format!(
        "10^4 mutations rejected ({parsed} parsed), no 8-byte leak in 16 proofs, three failure reasons as designed"
    ))
}

fn latency_structure() -> Outcome {
    let rep = run_latency_experiment(&LatencyConfig::default()).map_err(|e| e.to_string())?;
    ensure(rep.samples.len() == 200, format!("{} samples", rep.samples.len()))?;
    for s in &rep.samples {
        let sum = s.t_deliver_to_proxy + s.t_chatbot_interaction + s.t_deliver_to_user;
        ensure((sum - s.total).abs() <= 1e-3, format!("{}: components {sum} vs total {}", s.query_id, s.total))?;
    }
    let m = &rep.summary;
    ensure(
        (7.0..=10.0).contains(&m.mean_chatbot_interaction),
        format!("chatbot interaction mean {:.3} s", m.mean_chatbot_interaction),
    )?;
    let r = m.pearson_r.ok_or("no correlation")?;
    ensure(r > 0.2, format!("pearson r {r:.4}"))?;
    Ok(format!(
        "components add up; chatbot mean {:.2} s, total mean {:.2} s, r = {r:.3}",
        m.mean_chatbot_interaction, m.mean_total
    ))
}

fn opacity_and_retention() -> Outcome {
    const DAY: u64 = 86_400_000;
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let path = dir.path().join("state.json");
    let w = world(CoordinatorConfig {
        p_a: 0.0,
        seed: Some(2),
        ..CoordinatorConfig::default()
    });
    let coordinator = Arc::try_unwrap(w.coordinator).ok().unwrap().with_store(&path).map_err(|e| e.to_string())?;
    let w = common::World {
        coordinator: Arc::new(coordinator),
        ..w
    };
    let mut p = w.proxy_core("p", 1);
    w.activate(&mut p);
    let start = w.clock.now_ms();
    let markers: Vec<String> = (0..4).map(|i| format!("PLANTED-{i}-c4f1e8-heron")).collect();
    let mut ids = Vec::new();
    let mut rng = ChaCha20Rng::seed_from_u64(9);
    // ages at purge time: 35, 31, 29 and 1 days
    for (marker, offset) in markers.iter().zip([0u64, 4, 6, 34]) {
        w.clock.set(start + offset * DAY);
        let token = w.token(&p);
        w.coordinator.poll_queries(&token).map_err(|e| e.to_string())?;
        let q = w.user_query("p", &format!("Please explain {marker}."), &mut rng);
        w.coordinator.submit_query(&q.envelope).map_err(|e| e.to_string())?;
        let env = w.coordinator.poll_queries(&token).map_err(|e| e.to_string())?.queries.remove(0);
        let h = p.handle_envelope(&env, &mut ClockPause(w.clock.clone())).map_err(|e| e.to_string())?;
        w.coordinator.submit_response(&token, &h.respond).map_err(|e| e.to_string())?;
        ids.push(q.query_id());
    }
    let stored = std::fs::read_to_string(&path).map_err(|e| e.to_string())?;
    for m in &markers {
        ensure(!stored.contains(m.as_str()), format!("{m} persisted"))?;
    }
    ensure(!stored.contains("Please explain"), "query framing persisted")?;

    w.clock.set(start + 35 * DAY);
    let removed = w.coordinator.purge_expired().map_err(|e| e.to_string())?;
    ensure(removed == 2, format!("purged {removed}, expected 2"))?;
    let gone: Vec<bool> = ids.iter().map(|id| w.coordinator.fetch_response(id) == Err(CoordinatorError::NotFound)).collect();
    ensure(gone == [true, true, false, false], format!("purged pattern {gone:?}"))?;
    Ok("no planted marker in the store; purge removed exactly the two >30-day records".into())
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 9] = [
        ("scenario-table-golden", scenario_table_golden),
        ("uncaught-bad-reproduction", uncaught_bad),
        ("honesty-threshold", honesty_threshold_property),
        ("equilibrium-bounds", equilibrium_bounds),
        ("protocol-sim-seed-7", protocol_sim),
        ("double-spend-race", double_spend_race),
        ("provenance-adversarial", provenance_suite),
        ("latency-structure", latency_structure),
        ("opacity-and-retention", opacity_and_retention),
    ];
    let mut failed = 0;
    for (name, run) in criteria {
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|e| {
            let msg = e.downcast_ref::<String>().cloned().or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()));
            Err(format!("panicked: {}", msg.unwrap_or_default()))
        });
        let took = start.elapsed();
        match outcome {
            Ok(detail) => println!("PASS {name} ({took:.1?}): {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL {name} ({took:.1?}): {detail}");
            }
        }
    }
    println!("{} of 9 criteria pass", 9 - failed);
}
