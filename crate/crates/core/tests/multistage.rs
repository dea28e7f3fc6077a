//! Multistage reduction: the product of stage weights against the closed-form
//! joint Gaussian density ratio, and agent-wise versus DM-wise optimality on
//! brute-forced finite instances.

use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use teamred::multistage::{
    agwise_groups, agwise_pbp_check, reduce, dmwise_pbp_check, finder_cost, finder_team, independent_data_refs_scaled, independent_data_weight, rollout,
    rollout_matches_flat, FinderHit, LinearGaussianConfig, FINDER_GRID,
};
use teamred::optimality::{evaluate_cost, pbp_check, pbp_check_groups, BestResponseClass};
use teamred::reduction_independent::ReducedProblem;
use teamred::scenarios::{ms_instance, MS_Q_SCALE};
use teamred::{simulate_path, MonteCarloPlan, Policy, PolicyRep};

const A: f64 = 0.8;
const B: [f64; 2] = [0.6, -0.4];
const C: [f64; 2] = [1.0, 0.5];
const X0_VAR: f64 = 1.2;
const W_VAR: f64 = 0.7;
const V_VAR: f64 = 0.9;
/// Stage-0 policy `u_0^i = G[i] y_0^i + H[i]`.
const G: [f64; 2] = [0.7, -1.1];
const H: [f64; 2] = [0.2, -0.3];

fn config() -> LinearGaussianConfig {
    LinearGaussianConfig {
        name: "two-by-two".into(),
        horizon: 2,
        agents: 2,
        a: A,
        b: B.to_vec(),
        c: C.to_vec(),
        x0_var: X0_VAR,
        w_var: W_VAR,
        v_var: V_VAR,
        q: 1.0,
        r: 0.5,
        s: 1.0,
        q_terminal: 1.0,
        info: "recall".into(),
    }
}

fn policy() -> Policy {
    Policy::new(vec![
        Policy::affine_row(&[G[0]], H[0]),
        Policy::affine_row(&[G[1]], H[1]),
        Policy::affine_row(&[0.4, -0.2], 0.1),
        Policy::affine_row(&[-0.3, 0.6], 0.0),
    ])
}

fn gauss_logpdf(x: &DVector<f64>, mean: &DVector<f64>, cov: &DMatrix<f64>) -> f64 {
    let chol = cov.clone().cholesky().expect("covariance is positive definite");
    let d = x - mean;
    let z = chol.l().solve_lower_triangular(&d).unwrap();
    let logdet: f64 = 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
    -0.5 * (z.norm_squared() + logdet + x.len() as f64 * (2.0 * std::f64::consts::PI).ln())
}

/// Given x0 and w0, `y = A y + m + v` with A strictly lower triangular in the
/// order (y_0^1, y_0^2, y_1^1, y_1^2). The weight is the density of y under
/// that joint Gaussian over the product of the references N(0, 4 v_var).
fn closed_form_ratio(x0: f64, w0: f64, y: &[f64]) -> f64 {
    let mut a = DMatrix::zeros(4, 4);
    for i in 0..2 {
        for j in 0..2 {
            a[(2 + i, j)] = C[i] * B[j] * G[j];
        }
    }
    let drift = A * x0 + w0 + B[0] * H[0] + B[1] * H[1];
    let m = DVector::from_column_slice(&[C[0] * x0, C[1] * x0, C[0] * drift, C[1] * drift]);
    let inv = (DMatrix::identity(4, 4) - &a).try_inverse().unwrap();
    let mean = &inv * m;
    let cov = &inv * inv.transpose() * V_VAR;
    let y = DVector::from_column_slice(y);
    let q_var = MS_Q_SCALE * V_VAR;
    let log_q: f64 = y.iter().map(|v| -0.5 * (v * v / q_var + (2.0 * std::f64::consts::PI * q_var).ln())).sum();
    (gauss_logpdf(&y, &mean, &cov) - log_q).exp()
}

#[test]
fn weight_product_equals_joint_gaussian_ratio() {
    let team = config().build().unwrap();
    let refs = independent_data_refs_scaled(&team, MS_Q_SCALE).unwrap();
    let p = policy();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let sd = [X0_VAR.sqrt(), W_VAR.sqrt(), V_VAR.sqrt(), V_VAR.sqrt(), V_VAR.sqrt(), V_VAR.sqrt()];
    let mut worst: f64 = 0.0;
    for _ in 0..200 {
        let prims: Vec<Vec<f64>> = sd
            .iter()
            .map(|s| {
                let z: f64 = StandardNormal.sample(&mut rng);
                vec![s * z]
            })
            .collect();
        let traj = rollout(&team, &p, &prims).unwrap();
        let y: Vec<f64> = traj.ys.iter().flatten().map(|v| v[0]).collect();
        let w = independent_data_weight(&team, &refs, &prims, &traj).unwrap();
        let oracle = closed_form_ratio(prims[0][0], prims[1][0], &y);
        worst = worst.max((w - oracle).abs() / (1.0 + oracle.abs()));
    }
    assert!(worst <= 1e-10, "{worst}");
}

#[test]
fn rollout_matches_the_flattened_problem() {
    let team = config().build().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..100 {
        let prims = team.primitives.draw(&mut rng).values;
        assert!(rollout_matches_flat(&team, &policy(), &prims).unwrap() < 1e-12);
    }
}

fn hit(b: f64, d: f64) -> FinderHit {
    FinderHit { b, d, point: (0.0, 0.0), point_cost: 0.0, best: (0.0, 0.0), best_cost: 0.0 }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    // Costs on a half-integer lattice so every nonzero improvement is at
    // least 0.5, far above the person-by-person tolerance.
    #[test]
    fn agentwise_optimality_implies_dmwise(bk in -8i32..=8, dk in -2i32..=2, i in 0usize..3, j in 0usize..3) {
        let (b, d) = (0.5 * bk as f64, 0.5 * dk as f64);
        let (a0, a1) = (FINDER_GRID[i], FINDER_GRID[j]);
        let team = finder_team(&hit(b, d));
        let p = Policy::new(vec![Policy::constant(0, vec![a0]), Policy::constant(0, vec![a1])]);
        let class = BestResponseClass::Tabular { grid: FINDER_GRID.iter().map(|x| vec![*x]).collect() };
        let plan = MonteCarloPlan::exact();
        let ag = agwise_pbp_check(&team, &p, &plan, &class).unwrap().pass;
        let dm = dmwise_pbp_check(&team, &p, &plan, &class).unwrap().pass;
        prop_assert!(!ag || dm);

        let c = |x: f64, y: f64| finder_cost(b, d, x, y);
        let v = c(a0, a1);
        let global = FINDER_GRID.iter().all(|x| FINDER_GRID.iter().all(|y| c(*x, *y) >= v));
        let coordinatewise = FINDER_GRID.iter().all(|z| c(*z, a1) >= v && c(a0, *z) >= v);
        prop_assert_eq!(ag, global);
        prop_assert_eq!(dm, coordinatewise);
    }
}

fn shifted(policy: &Policy, dm: usize, delta: f64) -> Policy {
    let mut p = policy.clone();
    if let PolicyRep::Affine { bias, .. } = &mut p.entries[dm] {
        bias[0] += delta;
    }
    p
}

/// The dynamic cost of an affine profile is a quadratic in Gaussian
/// primitives, so three nodes are exact there; the tilted cost is not and is
/// sampled.
#[test]
fn verdicts_agree_between_dynamic_and_reduced_forms() {
    let exact = MonteCarloPlan::quadrature(3);
    let sampled = MonteCarloPlan::monte_carlo(10_000, 42);
    for name in ["example6_ms", "example7_ms"] {
        let inst = ms_instance(name, &exact).unwrap();
        let flat = inst.team.to_team_problem().unwrap();
        let reduced = reduce(&inst.team, inst.refs.clone().unwrap()).unwrap();
        let ag = agwise_groups(&inst.team);
        let dm: Vec<Vec<usize>> = (0..inst.team.n_dms()).map(|d| vec![d]).collect();
        for (label, p) in [("star", inst.policy.clone()), ("shifted", shifted(&inst.policy, 0, 1.5))] {
            for groups in [&ag, &dm] {
                let a = pbp_check_groups(&flat, &p, &exact, &BestResponseClass::Affine, groups).unwrap();
                let b = pbp_check_groups(&reduced, &p, &sampled, &BestResponseClass::Affine, groups).unwrap();
                assert_eq!(a.pass, b.pass, "{name} {label} {groups:?}: {:?} vs {:?}", a.failing, b.failing);
                assert_eq!(a.pass, label == "star", "{name} {label} {groups:?}");
                assert!(label == "star" || (a.failing.contains(&0) && b.failing.contains(&0)));
            }
        }
    }
}

#[test]
fn horizon_one_agrees_with_the_single_stage_modules() {
    let cfg = LinearGaussianConfig { horizon: 1, ..config() };
    let team = cfg.build().unwrap();
    let flat = team.to_team_problem().unwrap();
    let p = Policy::new(vec![Policy::affine_row(&[G[0]], H[0]), Policy::affine_row(&[G[1]], H[1])]);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..100 {
        let prims = team.primitives.draw(&mut rng);
        let traj = rollout(&team, &p, &prims.values).unwrap();
        let path = simulate_path(&flat, &p, &prims).unwrap();
        let ys: Vec<Vec<f64>> = traj.ys.concat();
        assert_eq!(ys, path.ys);
        assert_eq!(traj.us.concat(), path.us);
        assert!((traj.total - path.cost).abs() <= 1e-12);
    }
    let plan = MonteCarloPlan::quadrature(6);
    let class = BestResponseClass::Affine;
    let single = pbp_check(&flat, &p, &plan, &class).unwrap();
    for r in [agwise_pbp_check(&team, &p, &plan, &class).unwrap(), dmwise_pbp_check(&team, &p, &plan, &class).unwrap()] {
        assert_eq!((r.pass, &r.failing), (single.pass, &single.failing));
        for (x, y) in r.results.iter().zip(&single.results) {
            assert_eq!(x.improvement.mean.to_bits(), y.improvement.mean.to_bits());
        }
    }
    let refs = independent_data_refs_scaled(&team, MS_Q_SCALE).unwrap();
    let a = evaluate_cost(&reduce(&team, refs.clone()).unwrap(), &p, &plan).unwrap();
    let b = evaluate_cost(&ReducedProblem::new(flat, refs).unwrap(), &p, &plan).unwrap();
    assert_eq!(a.mean.to_bits(), b.mean.to_bits());
}
