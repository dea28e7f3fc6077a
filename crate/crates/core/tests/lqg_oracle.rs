//! LQG gains and costs against oracles that share no code with the solver:
//! grid-refinement minimization of an independently written cost, and
//! sequential simulation of the dynamic measurements.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use teamred::lqg::{exact_cost, solve_static_gains, solve_static_gains_iterative, transport_gains_g_to_k, GainSet, LqgForm, LqgTeam};
use teamred::scenarios::{lqg_scalar, lqg_vector};

/// Scalar gain of DM i on signal k (dims are 1 throughout).
type Gains = Vec<Vec<f64>>;

/// `u = L ζ` for static gains, built row by row from `u_i = Σ_k g_ik H_k ζ`.
fn static_map(team: &LqgTeam, blocks: &[Vec<usize>], g: &Gains) -> DMatrix<f64> {
    let nz = team.sigma.nrows();
    let mut l = DMatrix::zeros(team.h.len(), nz);
    for (i, blk) in blocks.iter().enumerate() {
        for (c, k) in blk.iter().enumerate() {
            let row = team.h[*k].row(0) * g[i][c];
            let cur = l.row(i).clone_owned();
            l.set_row(i, &(cur + row));
        }
    }
    l
}

fn oracle_cost(team: &LqgTeam, blocks: &[Vec<usize>], g: &Gains) -> f64 {
    let l = static_map(team, blocks, g);
    let m = &team.q + l.transpose() * &team.r * &l + l.transpose() * &team.s + team.s.transpose() * &l;
    (m * &team.sigma).trace()
}

fn flatten(g: &Gains) -> Vec<f64> {
    g.iter().flatten().copied().collect()
}

fn unflatten(x: &[f64], blocks: &[Vec<usize>]) -> Gains {
    let mut at = 0;
    blocks
        .iter()
        .map(|b| {
            let v = x[at..at + b.len()].to_vec();
            at += b.len();
            v
        })
        .collect()
}

/// Zooming grid search: evaluate a (2m+1)^d grid, recenter on the best point, shrink.
fn grid_minimize(f: impl Fn(&[f64]) -> f64, d: usize, half_width: f64, m: i64, rounds: usize) -> Vec<f64> {
    let mut center = vec![0.0; d];
    let mut w = half_width;
    for _ in 0..rounds {
        let step = w / m as f64;
        let side = (2 * m + 1) as usize;
        let mut best = (f64::INFINITY, center.clone());
        for idx in 0..side.pow(d as u32) {
            let mut rem = idx;
            let x: Vec<f64> = (0..d)
                .map(|k| {
                    let o = (rem % side) as i64 - m;
                    rem /= side;
                    center[k] + o as f64 * step
                })
                .collect();
            let v = f(&x);
            if v < best.0 {
                best = (v, x);
            }
        }
        center = best.1;
        w = 2.0 * step;
    }
    center
}

fn solver_gains(gs: &GainSet) -> Gains {
    gs.g.as_ref().unwrap().iter().map(|m| m.iter().copied().collect()).collect()
}

#[test]
fn scalar_gains_match_brute_force() {
    let team = lqg_scalar(1.0);
    let blocks = team.blocks();
    let cost = |x: &[f64]| 1.0 + x[0] * x[0] + x[1] * x[1] + 2.0 * x[0] + 2.0 * x[1];
    let x = grid_minimize(cost, 2, 4.0, 20, 12);
    assert!((x[0] + 1.0).abs() < 1e-6 && (x[1] + 1.0).abs() < 1e-6, "{x:?}");
    let got = flatten(&solver_gains(&solve_static_gains(&team).unwrap()));
    for (a, b) in got.iter().zip(&x) {
        assert!((a - b).abs() < 1e-6, "solver {got:?} oracle {x:?}");
    }
    let g = unflatten(&got, &blocks);
    assert!((oracle_cost(&team, &blocks, &g) - cost(&got)).abs() < 1e-12);
    assert!((oracle_cost(&team, &blocks, &g) + 1.0).abs() < 1e-12);
}

#[test]
fn vector_gains_match_brute_force() {
    let team = lqg_vector(1.0);
    let blocks = team.blocks();
    assert_eq!(blocks, vec![vec![0], vec![0, 1]]);
    let x = grid_minimize(|x| oracle_cost(&team, &blocks, &unflatten(x, &blocks)), 3, 4.0, 10, 22);
    let gs = solve_static_gains(&team).unwrap();
    let got = flatten(&solver_gains(&gs));
    for (a, b) in got.iter().zip(&x) {
        assert!((a - b).abs() < 1e-6, "solver {got:?} oracle {x:?}");
    }
    let j_oracle = oracle_cost(&team, &blocks, &unflatten(&x, &blocks));
    let j_s = exact_cost(&team, &gs, LqgForm::S).unwrap();
    assert!((j_s - j_oracle).abs() < 1e-10, "{j_s} vs {j_oracle}");
    assert!((j_s - 2.123614397808).abs() < 1e-9, "{j_s}");
}

/// Actions of DM 0…N−1 at ζ: static from `H_k ζ`, dynamic by running the
/// measurements `ŷ_k = H_k ζ + Σ_j B_kj u_j` in index order.
fn actions(team: &LqgTeam, blocks: &[Vec<usize>], g: &Gains, zeta: &DVector<f64>, dynamic: bool) -> Vec<f64> {
    let n = team.h.len();
    let mut u = vec![0.0; n];
    let mut y = vec![0.0; n];
    for i in 0..n {
        let mut yi = (&team.h[i] * zeta)[0];
        if dynamic {
            for j in 0..i {
                if let Some(b) = team.b.get(&(i, j)) {
                    yi += b[(0, 0)] * u[j];
                }
            }
        }
        y[i] = yi;
        u[i] = blocks[i].iter().zip(&g[i]).map(|(k, gk)| gk * y[*k]).sum();
    }
    u
}

#[test]
fn transported_gains_reproduce_static_actions_pathwise() {
    let team = lqg_vector(1.0);
    let blocks = team.blocks();
    let gs = transport_gains_g_to_k(&team, &solve_static_gains(&team).unwrap()).unwrap();
    let g = solver_gains(&gs);
    let k: Gains = gs.k.as_ref().unwrap().iter().map(|m| m.iter().copied().collect()).collect();
    let chol = team.sigma.clone().cholesky().unwrap().l();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst: f64 = 0.0;
    for _ in 0..10_000 {
        let z = &chol * DVector::from_fn(3, |_, _| StandardNormal.sample(&mut rng));
        let us = actions(&team, &blocks, &g, &z, false);
        let ud = actions(&team, &blocks, &k, &z, true);
        worst = us.iter().zip(&ud).fold(worst, |m, (a, b)| m.max((a - b).abs()));
    }
    assert!(worst <= 1e-9, "{worst}");
    let (js, jd) = (exact_cost(&team, &gs, LqgForm::S).unwrap(), exact_cost(&team, &gs, LqgForm::D).unwrap());
    assert!((js - jd).abs() <= 1e-10, "{js} vs {jd}");
}

fn random_team(n: usize, nz: usize, entries: &[f64]) -> LqgTeam {
    let mut it = entries.iter().copied().cycle();
    let a = DMatrix::from_fn(nz, nz, |_, _| it.next().unwrap());
    let sigma = &a * a.transpose() + DMatrix::identity(nz, nz) * 0.5;
    let h = (0..n).map(|_| DMatrix::from_fn(1, nz, |_, _| it.next().unwrap())).collect();
    let mut b = BTreeMap::new();
    for i in 1..n {
        let v = it.next().unwrap();
        if v.abs() > 0.3 {
            b.insert((i, i - 1), DMatrix::from_element(1, 1, v));
        }
    }
    let c = DMatrix::from_fn(n, n, |_, _| it.next().unwrap());
    let r = &c * c.transpose() + DMatrix::identity(n, n);
    let s = DMatrix::from_fn(n, nz, |_, _| it.next().unwrap());
    let q = s.transpose() * &s + DMatrix::identity(nz, nz) * 0.1;
    LqgTeam { sigma, h, b, u_dims: vec![1; n], q, r, s }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn solver_gains_are_stationary_and_costs_agree(
        n in 2usize..4,
        extra in 0usize..2,
        entries in prop::collection::vec(-1.0f64..1.0, 40),
    ) {
        let team = random_team(n, n + extra, &entries);
        let hs = DMatrix::from_fn(n, n + extra, |i, j| team.h[i][(0, j)]);
        prop_assume!(hs.singular_values().min() > 0.2);
        let blocks = team.blocks();
        let gs = solve_static_gains(&team).unwrap();
        let x = flatten(&solver_gains(&gs));
        let f = |x: &[f64]| oracle_cost(&team, &blocks, &unflatten(x, &blocks));
        let j0 = f(&x);
        let h = 1e-4;
        for k in 0..x.len() {
            let mut up = x.clone();
            let mut dn = x.clone();
            up[k] += h;
            dn[k] -= h;
            let grad = (f(&up) - f(&dn)) / (2.0 * h);
            prop_assert!(grad.abs() < 1e-6 * (1.0 + j0.abs()), "grad {} at coord {}", grad, k);
            prop_assert!(f(&up) >= j0 - 1e-12 && f(&dn) >= j0 - 1e-12);
        }
        let js = exact_cost(&team, &gs, LqgForm::S).unwrap();
        prop_assert!((js - j0).abs() < 1e-10 * (1.0 + j0.abs()));
        let gi = solve_static_gains_iterative(&team, 100_000, 1e-13).unwrap();
        for (a, b) in x.iter().zip(flatten(&solver_gains(&gi))) {
            prop_assert!((a - b).abs() < 1e-8);
        }
        let kt = transport_gains_g_to_k(&team, &gs).unwrap();
        let jd = exact_cost(&team, &kt, LqgForm::D).unwrap();
        prop_assert!((js - jd).abs() < 1e-10 * (1.0 + js.abs()), "{} vs {}", js, jd);
    }
}

/// Two independently computed optima act identically on sampled paths, in
/// both forms.
#[test]
fn independent_optima_agree_pathwise() {
    use teamred::lqg::gains_to_policy;
    use teamred::reduction_dependent::{make_form, pathwise_action_gap, Form};
    for team in [lqg_scalar(1.0), lqg_vector(1.0)] {
        let (d, inv) = team.to_problem("lqg").unwrap();
        let s = make_form(&d, &inv, &Form::S.into()).unwrap();
        let direct = transport_gains_g_to_k(&team, &solve_static_gains(&team).unwrap()).unwrap();
        let fixed_point = transport_gains_g_to_k(&team, &solve_static_gains_iterative(&team, 100_000, 1e-13).unwrap()).unwrap();
        let (gap_s, _) = pathwise_action_gap(&s, &gains_to_policy(direct.g.as_ref().unwrap()), &s, &gains_to_policy(fixed_point.g.as_ref().unwrap()), 10_000, 1).unwrap();
        let (gap_d, _) = pathwise_action_gap(&d, &gains_to_policy(direct.k.as_ref().unwrap()), &d, &gains_to_policy(fixed_point.k.as_ref().unwrap()), 10_000, 2).unwrap();
        assert!(gap_s <= 1e-6 && gap_d <= 1e-6, "{gap_s:e} {gap_d:e}");
    }
}
