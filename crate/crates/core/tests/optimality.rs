//! Verdict agreement across equivalent forms and soundness of best responses.

use proptest::prelude::*;
use teamred::lqg::{gains_to_policy, policy_to_gains, solve_static_gains, transport_gains_g_to_k, GainSet};
use teamred::optimality::{best_response, evaluate_cost, pbp_check, stationarity_check, BestResponseClass, TestDirectionFamily};
use teamred::reduction_dependent::{check_condition_c, make_form, transport_policy_d_to_s, Form};
use teamred::reduction_independent::ReducedProblem;
use teamred::scenarios::{example1_problem, example2_problem, lqg_vector};
use teamred::{MonteCarloPlan, PathModel, Policy, PolicyRep};

fn pbp_pattern(model: &dyn PathModel, policy: &Policy, plan: &MonteCarloPlan) -> (bool, Vec<usize>) {
    let r = pbp_check(model, policy, plan, &BestResponseClass::Affine).unwrap();
    (r.pass, r.failing)
}

#[test]
fn pbp_verdicts_agree_between_dynamic_and_reduced_forms() {
    let plan = MonteCarloPlan::monte_carlo(20_000, 42);
    let (p2, _, r2) = example2_problem(0.5, 2.0, false);
    let reduced2 = ReducedProblem::new(p2.clone(), r2).unwrap();
    let star = Policy::new(vec![Policy::affine_row(&[0.0], 0.0), Policy::affine_row(&[0.0, 1.0], 0.0)]);
    let off = Policy::new(vec![Policy::affine_row(&[0.0], 0.8), Policy::affine_row(&[0.0, 0.3], 0.0)]);
    for (label, policy) in [("star", &star), ("perturbed", &off)] {
        let d = pbp_pattern(&p2, policy, &plan);
        let r = pbp_pattern(&reduced2, policy, &plan);
        assert_eq!(d, r, "example2 {label}");
    }
    assert!(pbp_pattern(&p2, &star, &plan).0);
    assert!(!pbp_pattern(&p2, &off, &plan).0);

    let (p1, _, r1) = example1_problem(0.5);
    let reduced1 = ReducedProblem::new(p1.clone(), r1).unwrap();
    let policy = Policy::new(vec![Policy::affine_row(&[0.2], 0.0), Policy::affine_row(&[0.5, 0.5], 0.1)]);
    assert_eq!(pbp_pattern(&p1, &policy, &plan), pbp_pattern(&reduced1, &policy, &plan));
}

#[test]
fn lqg_stationarity_agrees_across_d_and_s() {
    let team = lqg_vector(1.0);
    let (d, inv) = team.to_problem("lqg").unwrap();
    let s = make_form(&d, &inv, &Form::S.into()).unwrap();
    let plan = MonteCarloPlan::quadrature(8);
    let fam = TestDirectionFamily { linear: true, quadratic: false };
    let solved = solve_static_gains(&team).unwrap();
    let g_star = gains_to_policy(solved.g.as_ref().unwrap());
    let mut g_off = g_star.clone();
    if let PolicyRep::Affine { gain, .. } = &mut g_off.entries[0] {
        gain[0][0] += 0.3;
    }
    for (label, g) in [("optimum", g_star), ("perturbed", g_off)] {
        let gains = GainSet { g: Some(policy_to_gains(&g).unwrap()), k: None, ..solved.clone() };
        let k = transport_gains_g_to_k(&team, &gains).unwrap();
        let k_pol = gains_to_policy(k.k.as_ref().unwrap());
        assert!(check_condition_c(&d, &inv, &k_pol, &plan).unwrap().pass, "{label}");
        let in_s = stationarity_check(&s, &g, &plan, &fam, None).unwrap();
        let in_d = stationarity_check(&d, &k_pol, &plan, &fam, None).unwrap();
        assert_eq!(in_s.pass, in_d.pass, "{label}: S {} vs D {}", in_s.max_abs(), in_d.max_abs());
        assert_eq!(in_s.pass, label == "optimum", "{label}");
    }
}

#[test]
fn transported_d_optimum_keeps_its_cost_in_s() {
    let (p2, inv, _) = example2_problem(0.5, 2.0, false);
    let s = make_form(&p2, &inv, &Form::S.into()).unwrap();
    let star = Policy::new(vec![Policy::affine_row(&[0.0], 0.0), Policy::affine_row(&[0.0, 1.0], 0.0)]);
    let s_star = transport_policy_d_to_s(&p2, &inv, &star).unwrap();
    let plan = MonteCarloPlan::quadrature(12);
    let jd = evaluate_cost(&p2, &star, &plan).unwrap().mean;
    let js = evaluate_cost(&s, &s_star, &plan).unwrap().mean;
    assert!((jd - js).abs() <= 1e-9, "{jd} vs {js}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn best_responses_never_look_worse(
        g1 in -1.0f64..1.0, b1 in -1.0f64..1.0, g21 in -1.0f64..1.0, g22 in -1.0f64..1.0, dm in 0usize..2, seed in 0u64..1000,
    ) {
        let (p2, _, _) = example2_problem(0.5, 2.0, false);
        let policy = Policy::new(vec![Policy::affine_row(&[g1], b1), Policy::affine_row(&[g21, g22], 0.0)]);
        let plan = MonteCarloPlan::monte_carlo(4_000, seed);
        let r = best_response(&p2, &policy, dm, &BestResponseClass::Affine, &plan).unwrap();
        // With u2 not tracking u1 the cost of DM 1 is unbounded below.
        prop_assert!(!r.unbounded_below || r.improvement.mean == f64::INFINITY);
        prop_assert!(r.improvement.mean >= -3.0 * r.improvement.std_error, "{} ± {}", r.improvement.mean, r.improvement.std_error);
    }
}
