use curvecast::theory::{
    contraction_suite, regret_suite, tail_bound_suite, ContractionConfig, RegretConfig,
};

#[test]
fn regret_suite_has_no_violations() {
    let r = regret_suite(&RegretConfig::default(), 20, 1).unwrap();
    assert_eq!(r.trials.len(), 20);
    assert!(r.violations.is_empty(), "{:?}", r.violations);
    for t in &r.trials {
        assert!(t.regret <= t.bound, "{t:?}");
    }
    eprintln!(
        "min slack {:.2} of bound {:.2}",
        r.min_slack,
        r.config.bound()
    );
}

#[test]
fn regret_without_momentum_matches_classical_rate() {
    let cfg = RegretConfig {
        momentum_beta: 0.0,
        ..RegretConfig::default()
    };
    assert!(regret_suite(&cfg, 6, 100).unwrap().violations.is_empty());
}

#[test]
fn contraction_holds_over_100_seeds() {
    let cfg = ContractionConfig::default();
    assert!(cfg.rho() < 1.0);
    assert!(cfg.momentum_beta < (cfg.mu / cfg.lipschitz).sqrt());
    let r = contraction_suite(&cfg, 100, 7).unwrap();
    assert!(r.violations.is_empty(), "{:?}", r.violations);
    let last = *r.mean_sq_error.last().unwrap();
    eprintln!("stationary {last:.5} floor {:.5}", cfg.floor());
}

#[test]
fn tail_bound_over_dimensions() {
    for d in 1..=4 {
        let r =
            tail_bound_suite(d, 0.7, &[0.0, 0.5, 1.0, 2.0, 3.0, 4.0], 100_000, d as u64).unwrap();
        assert!(r.violations.is_empty(), "d={d}: {:?}", r.points);
    }
}
