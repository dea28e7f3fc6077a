//! Policy transport between problem forms: round trips, pathwise action and
//! cost equality, control sharing without upstream policies, enlargement,
//! and agreement with the closed-form LQG gain transport.

use proptest::prelude::*;
use teamred::lqg::{gains_to_policy, solve_static_gains, transport_gains_g_to_k};
use teamred::reduction_dependent::{make_form, pathwise_action_gap, transport_policy, transport_policy_d_to_s, transport_policy_s_to_d, Form, InvertibleObservation};
use teamred::scenarios::{example2_problem, example3_problem, lqg_vector};
use teamred::{Policy, TeamProblem};

fn two_dm_cases() -> Vec<(&'static str, TeamProblem, InvertibleObservation)> {
    let (p2, inv2, _) = example2_problem(0.5, 2.0, false);
    let (p3, inv3) = example3_problem();
    let (pl, invl) = lqg_vector(1.0).to_problem("lqg").unwrap();
    vec![("example2", p2, inv2), ("example3", p3, inv3), ("lqg", pl, invl)]
}

fn affine_d(p: &TeamProblem, g1: f64, b1: f64, g2: &[f64], b2: f64) -> Policy {
    assert_eq!(p.info_dim_of(1), g2.len());
    Policy::new(vec![Policy::affine_row(&[g1], b1), Policy::affine_row(g2, b2)])
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    // Example 3 needs u1 ≥ 0, so DM 1 plays the constant b1 there.
    #[test]
    fn round_trip_and_cost_are_pathwise_identical(
        g1 in -1.0f64..1.0, b1 in 0.0f64..1.0, g21 in -1.0f64..1.0, g22 in -1.0f64..1.0, b2 in -1.0f64..1.0,
    ) {
        for (name, d, inv) in two_dm_cases() {
            let g1 = if name == "example3" { 0.0 } else { g1 };
            let gamma = affine_d(&d, g1, b1, &[g21, g22], b2);
            let s = make_form(&d, &inv, &Form::S.into()).unwrap();
            let gamma_s = transport_policy_d_to_s(&d, &inv, &gamma).unwrap();
            let back = transport_policy_s_to_d(&d, &inv, &gamma_s).unwrap();
            let (ua, ca) = pathwise_action_gap(&d, &gamma, &s, &gamma_s, 2_000, 5).unwrap();
            prop_assert!(ua <= 1e-9 && ca <= 1e-9, "{}: D vs S actions {:e}, costs {:e}", name, ua, ca);
            let (ub, _) = pathwise_action_gap(&d, &gamma, &d, &back, 2_000, 6).unwrap();
            prop_assert!(ub <= 1e-9, "{}: round trip {:e}", name, ub);
        }
    }
}

#[test]
fn round_trip_holds_on_ten_thousand_paths() {
    for (name, d, inv) in two_dm_cases() {
        let gamma = affine_d(&d, 0.0, 0.3, &[0.4, -0.7], 0.1);
        let back = transport_policy_s_to_d(&d, &inv, &transport_policy_d_to_s(&d, &inv, &gamma).unwrap()).unwrap();
        let (gap, _) = pathwise_action_gap(&d, &gamma, &d, &back, 10_000, 42).unwrap();
        assert!(gap <= 1e-9, "{name}: {gap:e}");
    }
}

#[test]
fn control_sharing_transport_ignores_upstream_policies() {
    let (d, inv, _) = example2_problem(0.5, 2.0, false);
    let dcs = make_form(&d, &inv, &Form::DCs.into()).unwrap();
    let cs = make_form(&d, &inv, &Form::Cs.into()).unwrap();
    let dm2 = Policy::affine_row(&[0.3, -0.8, 0.5], 0.2);
    let stand_ins = [Policy::affine_row(&[1.0], 0.0), Policy::affine_row(&[-2.0], 5.0), Policy::closure("cube", 1, |x| Ok(vec![x[0].powi(3)]))];
    let transported: Vec<Policy> = stand_ins
        .iter()
        .map(|up| transport_policy(&d, &inv, &Form::DCs.into(), &Form::Cs.into(), &Policy::new(vec![up.clone(), dm2.clone()])).unwrap())
        .collect();
    assert_eq!(cs.info_dim_of(1), 3);
    for k in 0..200 {
        let x = k as f64 * 0.1 - 10.0;
        let info = [x.sin() * 3.0, x, 0.5 * x.cos()];
        let first = transported[0].entries[1].eval(&info).unwrap();
        for t in &transported[1..] {
            assert_eq!(t.entries[1].eval(&info).unwrap(), first);
        }
    }
    // The CS policy reproduces the D-CS actions on every path.
    let full = Policy::new(vec![stand_ins[0].clone(), dm2]);
    let (gap, _) = pathwise_action_gap(&dcs, &full, &cs, &transported[0], 5_000, 3).unwrap();
    assert!(gap <= 1e-9, "{gap:e}");
}

#[test]
fn lifted_policies_ignore_shared_actions() {
    let (d, inv, _) = example2_problem(0.5, 2.0, false);
    let dcs = make_form(&d, &inv, &Form::DCs.into()).unwrap();
    let gamma = affine_d(&d, 0.6, -0.1, &[0.2, 0.9], 0.3);
    let lifted = Policy::new(vec![Policy::affine_row(&[0.6], -0.1), Policy::affine_row(&[0.2, 0.9, 0.0], 0.3)]);
    assert_eq!(dcs.info_dim_of(1), 3);
    let (ua, ca) = pathwise_action_gap(&d, &gamma, &dcs, &lifted, 10_000, 8).unwrap();
    assert!(ua == 0.0 && ca == 0.0);
}

#[test]
fn gain_transport_matches_policy_transport() {
    let team = lqg_vector(1.0);
    let (d, inv) = team.to_problem("lqg").unwrap();
    let s = make_form(&d, &inv, &Form::S.into()).unwrap();
    let gk = transport_gains_g_to_k(&team, &solve_static_gains(&team).unwrap()).unwrap();
    let g_pol = gains_to_policy(gk.g.as_ref().unwrap());
    let k_pol = gains_to_policy(gk.k.as_ref().unwrap());
    let via_policy = transport_policy_s_to_d(&d, &inv, &g_pol).unwrap();
    let (gap, _) = pathwise_action_gap(&d, &k_pol, &d, &via_policy, 10_000, 42).unwrap();
    assert!(gap <= 1e-9, "{gap:e}");
    let (gap_s, cost_s) = pathwise_action_gap(&s, &g_pol, &d, &k_pol, 10_000, 43).unwrap();
    assert!(gap_s <= 1e-9 && cost_s <= 1e-9);
}
