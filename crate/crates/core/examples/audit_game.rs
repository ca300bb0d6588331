//! The audit game: equilibrium, the five payoff regimes, the honesty
//! threshold, and a Monte-Carlo check of the closed forms.

use veil::game::{
    expected_uncaught_bad, honesty_threshold, mixed_strategy_ne, scenario_table, simulate_game, GameSimConfig,
    Horizon, RewardMatrix, GAME_CSV_HEADER,
};

fn main() {
    let m = RewardMatrix { r_p_ah: 1.0, r_p_nh: -0.25, r_c_ah: -0.5 };
    let ne = mixed_strategy_ne(&m).expect("valid rewards");
    println!("equilibrium at {m:?}:\n  {ne:?}");

    println!("\n{:<34} {:>9} {:>9} {:>9} {:>9}", "scenario", "p_a*", "p_h*", "E[R_P]", "E[R_C]");
    for row in scenario_table(&m).unwrap() {
        let mark = if row.applies { "*" } else { " " };
        println!(
            "{mark}{:<33} {:>9.5} {:>9.5} {:>9.5} {:>9.5}",
            row.label, row.p_a_star, row.p_h_star, row.e_r_p, row.e_r_c
        );
    }

    println!("\nat p_a = 1/8 with free honesty, honesty pays once the audit reward exceeds {}", honesty_threshold(0.0, 0.125).unwrap());
    println!("an always-dishonest proxy expects {} bad answers before its first audit", expected_uncaught_bad(0.125).unwrap());

    let runs = GameSimConfig {
        matrix: RewardMatrix::from_simple(0.0, 0.0, 0.0),
        p_a: 0.125,
        p_h: 0.0,
        horizon: Horizon::Runs(100_000),
        seed: 1,
    };
    let at_ne = GameSimConfig { matrix: m, p_a: ne.p_a_star, p_h: ne.p_h_star, horizon: Horizon::Trials(200_000), seed: 1 };
    println!("\n{GAME_CSV_HEADER}");
    for cfg in [runs, at_ne] {
        println!("{}", simulate_game(&cfg).unwrap().csv_row(&cfg));
    }
}
