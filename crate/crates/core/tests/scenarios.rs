//! Built-in scenarios: expected verdicts across seeds, frozen values,
//! parameter handling and a closed-form oracle for the policy chord gap.

use std::collections::BTreeMap;

use teamred::report::describe_scenario;
use teamred::scenarios::{build, run_scenario, CheckOutcome, Verdict, NAMES};
use teamred::{MonteCarloPlan, TeamError};

fn params(kv: &[(&str, f64)]) -> BTreeMap<String, f64> {
    kv.iter().map(|(k, v)| (k.to_string(), *v)).collect()
}

fn run(name: &str, kv: &[(&str, f64)], seed: u64) -> Vec<CheckOutcome> {
    let sc = build(name, &params(kv)).unwrap();
    run_scenario(&sc, &MonteCarloPlan::monte_carlo(20_000, seed)).unwrap().checks
}

fn check<'a>(checks: &'a [CheckOutcome], id: &str) -> &'a CheckOutcome {
    checks.iter().find(|c| c.id == id).unwrap_or_else(|| panic!("no check '{id}'"))
}

#[test]
fn every_expected_verdict_reproduces_under_three_seeds() {
    for seed in [7, 1001, 65_537] {
        for name in NAMES {
            let checks = run(name, &[], seed);
            assert!(!checks.is_empty(), "{name}");
            for c in &checks {
                assert!(c.matched, "seed {seed}, {name}/{}: got {:?}, expected {:?} ({})", c.id, c.verdict, c.expected, c.detail);
            }
        }
    }
}

#[test]
fn example2_pattern_does_not_depend_on_shared_noise() {
    let a = run("example2", &[("shared", 0.0)], 42);
    let b = run("example2", &[("shared", 1.0)], 42);
    let pattern = |cs: &[CheckOutcome]| -> BTreeMap<String, Verdict> {
        cs.iter().filter(|c| c.id != "cost_invariance").map(|c| (c.id.clone(), c.verdict)).collect()
    };
    assert_eq!(pattern(&a), pattern(&b));
    assert!(a.iter().chain(&b).all(|c| c.matched));
}

#[test]
fn frozen_values() {
    let e2 = run("example2", &[], 42);
    for (id, v) in [("curvature_d_dm1", 2.5), ("curvature_d_dm2", 1.0), ("curvature_s_dm1", -0.5)] {
        let got = check(&e2, id).estimate.unwrap();
        assert!((got - v).abs() < 1e-6, "{id}: {got}");
    }
    let e3 = run("example3", &[], 42);
    let r = check(&e3, "stationarity_s_dm1_constant").estimate.unwrap();
    assert!((r - 1.0).abs() < 1e-6, "{r}");
    assert!(check(&e3, "transport_pathwise").estimate.unwrap() <= 1e-9);
    let toy = run("finite_toy", &[], 42);
    assert!(check(&toy, "cost_invariance_exact").estimate.unwrap() <= 1e-12);
    let lqg = run("example5_lqg", &[], 42);
    let cost = check(&lqg, "exact_cost_vector");
    assert!(cost.estimate.unwrap().abs() <= 1e-10);
    assert!(cost.detail.contains("J_S 2.123614397808"), "{}", cost.detail);
}

/// `E√(s + x)` for `s ~ U(0, spread)`.
fn mean_sqrt(x: f64, spread: f64) -> f64 {
    2.0 / (3.0 * spread) * ((x + spread).powf(1.5) - x.powf(1.5))
}

/// Exact chord gap of the D form along the constant-u1 mixture; the quadratic
/// part contributes `−α(1 − α)(c − c')²` and u2 tracks the mixed u1.
fn chord_gap(alpha: f64, c: f64, c2: f64, spread: f64) -> f64 {
    let m = alpha * c + (1.0 - alpha) * c2;
    -alpha * (1.0 - alpha) * (c - c2).powi(2) + mean_sqrt(m, spread) - alpha * mean_sqrt(c, spread) - (1.0 - alpha) * mean_sqrt(c2, spread)
}

#[test]
fn example4_gap_matches_closed_form() {
    for (spread, c, c2) in [(0.01, 0.0, 0.25), (0.05, 0.0, 0.5), (0.01, 0.1, 0.3)] {
        let checks = run("example4", &[("spread", spread), ("c", c), ("c_prime", c2)], 42);
        let d = check(&checks, "convexity_d");
        let oracle = (0..=10).map(|k| chord_gap(k as f64 / 10.0, c, c2, spread)).fold(f64::NEG_INFINITY, f64::max);
        let (est, se) = (d.estimate.unwrap(), d.std_error.unwrap());
        assert!((est - oracle).abs() <= 4.0 * se + 1e-9, "spread {spread}, c {c}, c' {c2}: {est} ± {se} vs {oracle}");
    }
    assert!((chord_gap(0.7, 0.0, 0.25, 0.01) - 0.0714).abs() < 1e-3);
}

#[test]
fn constructors_are_pure() {
    for name in NAMES {
        let a = describe_scenario(&build(name, &BTreeMap::new()).unwrap());
        let b = describe_scenario(&build(name, &BTreeMap::new()).unwrap());
        assert_eq!(a.to_string(), b.to_string(), "{name}");
    }
    let kv = params(&[("alpha", 0.3), ("beta", 3.0), ("shared", 1.0)]);
    assert_eq!(describe_scenario(&build("example2", &kv).unwrap()), describe_scenario(&build("example2", &kv).unwrap()));
}

#[test]
fn bad_names_and_parameters_are_rejected() {
    assert!(matches!(build("example9", &BTreeMap::new()), Err(TeamError::Config(_))));
    assert!(matches!(build("example1", &params(&[("beta", 1.0)])), Err(TeamError::Parameter(_))));
    assert!(matches!(build("example1", &params(&[("alpha", f64::NAN)])), Err(TeamError::Parameter(_))));
}
