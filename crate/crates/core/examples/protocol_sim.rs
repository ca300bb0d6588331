//! Three honest proxies and one that always fabricates, 4000 user queries
//! at an audit rate of 1/8.

use std::time::Instant;

use veil::sim::{run_protocol_sim, SimConfig};

fn main() {
    let seed = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(7);
    let cfg = SimConfig { seed, ..SimConfig::default() };
    let started = Instant::now();
    let report = run_protocol_sim(&cfg).expect("simulation runs");
    println!("{}", report.to_json());
    eprintln!("wall time {:.1?}", started.elapsed());
}
