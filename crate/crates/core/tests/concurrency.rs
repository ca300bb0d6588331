mod common;

use std::sync::{Arc, Barrier};

use common::world;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use veil::coordinator::{CoordinatorConfig, CoordinatorError};

#[test]
fn one_token_spent_twice_at_once_is_accepted_once() {
    let w = world(CoordinatorConfig {
        p_a: 0.0,
        seed: Some(1),
        ..CoordinatorConfig::default()
    });
    let mut p = w.proxy_core("p", 1);
    w.activate(&mut p);
    let mut rng = ChaCha20Rng::seed_from_u64(3);
    for rep in 0..100 {
        let a = w.user_query("p", &format!("A{rep}"), &mut rng);
        let mut b = w.user_query("p", &format!("B{rep}"), &mut rng);
        b.envelope.payment = a.envelope.payment.clone();
        let gate = Arc::new(Barrier::new(2));
        let results: Vec<_> = [a.envelope, b.envelope]
            .into_iter()
            .map(|env| {
                let (c, gate) = (w.coordinator.clone(), gate.clone());
                std::thread::spawn(move || {
                    gate.wait();
                    c.submit_query(&env)
                })
            })
            .collect::<Vec<_>>()
            .into_iter()
            .map(|h| h.join().unwrap())
            .collect();
        assert_eq!(results.iter().filter(|r| r.is_ok()).count(), 1, "rep {rep}: {results:?}");
        assert!(results.iter().any(|r| r == &Err(CoordinatorError::DoubleSpend)));
    }
}
