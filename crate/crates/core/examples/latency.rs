//! Where a query's time goes: delivery to the proxy, the chatbot session
//! with its mandated waits, and delivery back to the user.

use veil::sim::{run_latency_experiment, LatencyConfig};

fn main() {
    let cfg = LatencyConfig { queries: 100, issuer_bits: 1024, ..LatencyConfig::default() };
    let rep = run_latency_experiment(&cfg).expect("experiment runs");
    let s = &rep.summary;
    println!("{} queries (virtual time)", s.count);
    println!("  to proxy      {:>7.3} s", s.mean_deliver_to_proxy);
    println!("  chatbot       {:>7.3} s", s.mean_chatbot_interaction);
    println!("  to user       {:>7.3} s", s.mean_deliver_to_user);
    println!("  total         {:>7.3} s (sd {:.3})", s.mean_total, s.std_total);
    println!("  r(total, response length) = {:.3}", s.pearson_r.unwrap_or(f64::NAN));
    println!("  throughput {:.2} queries per proxy-minute", rep.queries_per_minute);
    println!("\nfirst rows:");
    for line in rep.csv().lines().take(4) {
        println!("  {line}");
    }
}
