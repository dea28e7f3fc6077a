//! Built-in catalogue of worked team problems with expected verdicts.
//!
//! [`build`] wires a named problem with its reference policies and expected
//! outcomes; [`run_scenario`] recomputes every check and compares.

use std::collections::BTreeMap;
use std::sync::Arc;

use nalgebra::DMatrix;
use rand::Rng as _;
use serde::Serialize;

use crate::error::{Result, TeamError};
use crate::lqg::{
    exact_cost, gains_to_policy, solve_static_gains, solve_static_gains_iterative, transport_gains_g_to_k, LqgForm,
    LqgTeam,
};
use crate::model_core::{
    ActionSpace, CostFunction, Dist, InformationStructure, MeasurementMap, Policy, PolicyRep, PrimitiveSpace, Signal,
    TeamProblem,
};
use crate::montecarlo::{MonteCarloPlan, Sampling};
use crate::multistage::{
    agwise_groups, certify_agwise_global, check_agwise_nested, dmwise_pbp_check, find_dmwise_not_agwise, finder_team,
    identity_refs, independent_data_refs_scaled, reduce, zero_policy, LinearGaussianConfig, MsSignal, MultiStageTeam,
    FINDER_GRID,
};
use crate::optimality::{
    best_response, certify_global_optimality, convexity_in_policies_check, evaluate_many, frozen_cost_at,
    frozen_curvature, iterate_best_responses, pbp_check, pbp_check_groups, stationarity_check, alpha_grid,
    BestResponseClass, BestResponseResult, CertificateVerdict, PbpReport, StationarityReport, TestDirectionFamily,
};
use crate::reduction_dependent::{
    affinize_policy, check_condition_c, make_form, pathwise_action_gap, transport_policy_d_to_s, Form,
    InvertibleObservation, ObservationDecomposition,
};
use crate::reduction_independent::{bayes_consistency, cost_gap, weight_mean, ReducedProblem, ReferenceMeasure};
use crate::rng::{stream_id, substream};

/// Outcome of one check.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Pass,
    Fail,
    Unbounded,
    Certified,
    Inconclusive,
    Violation,
    NoViolation,
}

impl Verdict {
    fn of(pass: bool) -> Self {
        if pass {
            Verdict::Pass
        } else {
            Verdict::Fail
        }
    }
}

/// An expected outcome with the statement it encodes.
#[derive(Clone, Debug, Serialize)]
pub struct Expectation {
    pub id: String,
    pub form: String,
    pub policy: String,
    pub expected: Verdict,
    pub claim: String,
}

/// One residual row; `dm` is 1-based.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ResidualRow {
    pub dm: usize,
    pub direction: String,
    pub residual: f64,
    pub se: f64,
}

/// A computed check joined with its expectation.
#[derive(Clone, Debug, Serialize)]
pub struct CheckOutcome {
    pub scenario: String,
    pub id: String,
    pub form: String,
    pub policy: String,
    pub verdict: Verdict,
    pub expected: Verdict,
    pub matched: bool,
    pub claim: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub estimate: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub std_error: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub residuals: Option<Vec<ResidualRow>>,
    pub detail: String,
}

#[derive(Clone, Debug, Serialize)]
pub struct ScenarioReport {
    pub scenario: String,
    pub params: BTreeMap<String, f64>,
    pub checks: Vec<CheckOutcome>,
    pub all_matched: bool,
}

/// Problem data of a scenario.
#[derive(Clone, Debug)]
pub enum ScenarioModel {
    Single {
        problem: TeamProblem,
        inv: Option<InvertibleObservation>,
        refs: Option<Vec<ReferenceMeasure>>,
    },
    Lqg {
        instances: Vec<(String, LqgTeam)>,
    },
    Multi {
        team: MultiStageTeam,
        refs: Vec<ReferenceMeasure>,
    },
}

#[derive(Clone, Debug)]
pub struct Scenario {
    pub name: String,
    pub params: BTreeMap<String, f64>,
    pub model: ScenarioModel,
    pub policies: BTreeMap<String, Policy>,
    pub expected: Vec<Expectation>,
}

/// Declared parameter of a scenario.
#[derive(Clone, Debug, Serialize)]
pub struct ParamSpec {
    pub name: &'static str,
    pub default: f64,
    pub range: &'static str,
}

#[derive(Clone, Debug, Serialize)]
pub struct ScenarioInfo {
    pub name: &'static str,
    pub summary: &'static str,
    pub params: Vec<ParamSpec>,
}

pub const NAMES: [&str; 8] =
    ["example1", "example2", "example3", "example4", "example5_lqg", "example6_ms", "example7_ms", "finite_toy"];

pub fn catalogue() -> Vec<ScenarioInfo> {
    let p = |name, default, range| ParamSpec { name, default, range };
    vec![
        ScenarioInfo {
            name: "example1",
            summary: "cost (u1 − u2 + w2)² − α(u1)², channel y2 = w2 + u1; pbp in S but unbounded in D",
            params: vec![p("alpha", 0.5, "(0, 1)")],
        },
        ScenarioInfo {
            name: "example2",
            summary: "cost α(u1)² + β(u2 − w2)² − (u1 − u2 + w2)²; pbp in D but not in S",
            params: vec![p("alpha", 0.5, "(0, 1)"), p("beta", 2.0, "(1, ∞)"), p("shared", 0.0, "{0, 1}")],
        },
        ScenarioInfo {
            name: "example3",
            summary: "channel y2 = w2 + √u1 with u1 ≥ 0; stationary in D, not in S",
            params: vec![],
        },
        ScenarioInfo {
            name: "example4",
            summary: "cost (u1 + w0)² + (u2)² with u2 = (y2)^(1/4); nonconvex in policies in D, convex in CS",
            params: vec![p("spread", 0.01, "(0, ∞)"), p("c", 0.0, "[0, ∞)"), p("c_prime", 0.25, "[0, ∞)")],
        },
        ScenarioInfo {
            name: "example5_lqg",
            summary: "partially nested LQG teams: static gains, G→K transport, exact costs",
            params: vec![p("coupling", 1.0, "ℝ (0 drops the ζ–u cross term)")],
        },
        ScenarioInfo {
            name: "example6_ms",
            summary: "two agents, shared scalar state, Gaussian observations with recall; plus the finder instance",
            params: vec![p("a", 0.9, "ℝ"), p("r", 0.5, "[0, ∞)")],
        },
        ScenarioInfo {
            name: "example7_ms",
            summary: "two agents with private states and noiseless nested observations",
            params: vec![],
        },
        ScenarioInfo {
            name: "finite_toy",
            summary: "two DMs, three-point supports, cyclic channel; exact enumeration",
            params: vec![],
        },
    ]
}

fn resolve_params(name: &str, given: &BTreeMap<String, f64>) -> Result<BTreeMap<String, f64>> {
    let info = catalogue()
        .into_iter()
        .find(|s| s.name == name)
        .ok_or_else(|| TeamError::Config(format!("unknown scenario '{name}'; known: {}", NAMES.join(", "))))?;
    let mut out = BTreeMap::new();
    for p in &info.params {
        out.insert(p.name.to_string(), p.default);
    }
    for (k, v) in given {
        if !out.contains_key(k) {
            return Err(TeamError::Parameter(format!("scenario '{name}' has no parameter '{k}'")));
        }
        if !v.is_finite() {
            return Err(TeamError::Parameter(format!("parameter '{k}' must be finite")));
        }
        out.insert(k.clone(), *v);
    }
    Ok(out)
}

fn exp(id: &str, form: &str, policy: &str, expected: Verdict, claim: &str) -> Expectation {
    Expectation { id: id.into(), form: form.into(), policy: policy.into(), expected, claim: claim.into() }
}

fn affine2(g: &[f64], b: f64) -> PolicyRep {
    Policy::affine_row(g, b)
}

/// Generic affine profile with nonzero cost in both two-DM channel examples.
pub fn probe_policy() -> Policy {
    Policy::new(vec![affine2(&[0.3], 0.2), affine2(&[0.5, 0.4], -0.1)])
}

// ---------------------------------------------------------------- builders

/// Two-DM additive-channel problem shared by the first two examples:
/// `y1 = w1`, `y2 = (w2, w2 + u1)`; `shared` makes `w2` the same variable as `w1`.
fn two_dm_channel(
    name: &str,
    shared: bool,
    cost: impl Fn(&[Vec<f64>], &[Vec<f64>]) -> f64 + Send + Sync + 'static,
) -> (TeamProblem, InvertibleObservation, Vec<ReferenceMeasure>) {
    let mut prims = PrimitiveSpace::new();
    let w1 = prims.push("omega1", Dist::std_normal());
    let w2 = if shared { w1 } else { prims.push("omega2", Dist::std_normal()) };
    let problem = TeamProblem {
        name: name.into(),
        primitives: prims,
        measurements: vec![
            MeasurementMap::identity(0, w1, 1),
            MeasurementMap::new(1, vec![Signal::Prim(w2), Signal::U(0)], 1, "omega2 + u1", |r| vec![r[0][0] + r[1][0]]),
        ],
        info: InformationStructure { sets: vec![vec![Signal::Y(0)], vec![Signal::Y(0), Signal::Y(1)]] },
        cost: CostFunction::new(name, move |w, u| cost(w, u)),
        action_spaces: vec![ActionSpace::free(1), ActionSpace::free(1)],
    };
    let inv = InvertibleObservation::new(vec![
        ObservationDecomposition::unmixed(0, vec![w1], 1, |r| r[0].to_vec()),
        ObservationDecomposition::additive(1, vec![w2], 1, |r| r[0].to_vec(), vec![(0, vec![vec![1.0]])]),
    ]);
    let refs = if shared {
        Vec::new()
    } else {
        vec![
            ReferenceMeasure::identity(0, Dist::std_normal()),
            ReferenceMeasure::additive(1, w2, Dist::std_normal(), vec![Signal::U(0)], |r| vec![r[0][0]]),
        ]
    };
    (problem, inv, refs)
}

pub fn example1_problem(alpha: f64) -> (TeamProblem, InvertibleObservation, Vec<ReferenceMeasure>) {
    two_dm_channel("example1", false, move |w, u| {
        let v = u[0][0] - u[1][0] + w[1][0];
        v * v - alpha * u[0][0] * u[0][0]
    })
}

pub fn example2_problem(alpha: f64, beta: f64, shared: bool) -> (TeamProblem, InvertibleObservation, Vec<ReferenceMeasure>) {
    let w2 = if shared { 0 } else { 1 };
    two_dm_channel("example2", shared, move |w, u| {
        let (u1, u2, om) = (u[0][0], u[1][0], w[w2][0]);
        alpha * u1 * u1 + beta * (u2 - om).powi(2) - (u1 - u2 + om).powi(2)
    })
}

pub fn example3_problem() -> (TeamProblem, InvertibleObservation) {
    let mut prims = PrimitiveSpace::new();
    let w1 = prims.push("omega1", Dist::std_normal());
    let w2 = prims.push("omega2", Dist::std_normal());
    let problem = TeamProblem {
        name: "example3".into(),
        primitives: prims,
        measurements: vec![
            MeasurementMap::identity(0, w1, 1),
            MeasurementMap::new(1, vec![Signal::Prim(w2), Signal::U(0)], 1, "omega2 + sqrt(u1)", |r| {
                vec![r[0][0] + r[1][0].max(0.0).sqrt()]
            }),
        ],
        info: InformationStructure { sets: vec![vec![Signal::Y(0)], vec![Signal::Y(0), Signal::Y(1)]] },
        cost: CostFunction::new("(sqrt(u1) − u2 + omega2)²", |w, u| (u[0][0].max(0.0).sqrt() - u[1][0] + w[1][0]).powi(2)),
        action_spaces: vec![ActionSpace::nonnegative(1), ActionSpace::free(1)],
    };
    let inv = InvertibleObservation::new(vec![
        ObservationDecomposition::unmixed(0, vec![w1], 1, |r| r[0].to_vec()),
        ObservationDecomposition::sqrt_mix(1, w2, 0),
    ]);
    (problem, inv)
}

/// `y1 ~ N(0,1)`, `ŷ2 = s + u1` with `s ~ U(0, spread)`, `u1 ≥ 0`, cost `(u1 + w0)² + (u2)²`.
pub fn example4_problem(spread: f64) -> (TeamProblem, InvertibleObservation) {
    let mut prims = PrimitiveSpace::new();
    let w0 = prims.push("omega0", Dist::std_normal());
    let y1 = prims.push("y1", Dist::std_normal());
    let s = prims.push("yS2", Dist::uniform(vec![0.0], vec![spread]));
    let problem = TeamProblem {
        name: "example4".into(),
        primitives: prims,
        measurements: vec![
            MeasurementMap::identity(0, y1, 1),
            MeasurementMap::new(1, vec![Signal::Prim(s), Signal::U(0)], 1, "yS2 + u1", |r| vec![r[0][0] + r[1][0]]),
        ],
        info: InformationStructure { sets: vec![vec![Signal::Y(0)], vec![Signal::Y(0), Signal::Y(1)]] },
        cost: CostFunction::new("(u1 + omega0)² + (u2)²", move |w, u| (u[0][0] + w[w0][0]).powi(2) + u[1][0].powi(2)),
        action_spaces: vec![ActionSpace::nonnegative(1), ActionSpace::free(1)],
    };
    let inv = InvertibleObservation::new(vec![
        ObservationDecomposition::unmixed(0, vec![y1], 1, |r| r[0].to_vec()),
        ObservationDecomposition::additive(1, vec![s], 1, |r| r[0].to_vec(), vec![(0, vec![vec![1.0]])]),
    ]);
    (problem, inv)
}

fn fourth_root(x: f64) -> f64 {
    x.max(0.0).sqrt().sqrt()
}

/// Scalar static instance: `H1 = H2 = 1`, `Σ = 1`, `R = I`, `S = coupling·(1, 1)'`.
pub fn lqg_scalar(coupling: f64) -> LqgTeam {
    let one = DMatrix::from_element(1, 1, 1.0);
    LqgTeam {
        sigma: one.clone(),
        h: vec![one.clone(), one.clone()],
        b: BTreeMap::new(),
        u_dims: vec![1, 1],
        q: one,
        r: DMatrix::identity(2, 2),
        s: DMatrix::from_column_slice(2, 1, &[coupling, coupling]),
    }
}

/// `ζ ∈ ℝ³`, `H1 = (1, 1, 0)`, `H2 = (1, 0, 1)`, `B21 = 0.5`.
pub fn lqg_vector(coupling: f64) -> LqgTeam {
    let mut b = BTreeMap::new();
    b.insert((1, 0), DMatrix::from_element(1, 1, 0.5));
    LqgTeam {
        sigma: DMatrix::from_row_slice(3, 3, &[1.0, 0.3, 0.0, 0.3, 1.5, 0.2, 0.0, 0.2, 0.8]),
        h: vec![DMatrix::from_row_slice(1, 3, &[1.0, 1.0, 0.0]), DMatrix::from_row_slice(1, 3, &[1.0, 0.0, 1.0])],
        b,
        u_dims: vec![1, 1],
        q: DMatrix::identity(3, 3),
        r: DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]),
        s: DMatrix::from_row_slice(2, 3, &[1.0, 0.0, -0.5, 0.0, 1.0, 0.5]) * coupling,
    }
}

pub fn example6_config(a: f64, r: f64) -> LinearGaussianConfig {
    LinearGaussianConfig {
        name: "example6_ms".into(),
        horizon: 2,
        agents: 2,
        a,
        b: vec![0.0, 0.0],
        c: vec![1.0, 1.0],
        x0_var: 1.0,
        w_var: 1.0,
        v_var: 1.0,
        q: 0.0,
        r,
        s: 1.0,
        q_terminal: 0.0,
        info: "recall".into(),
    }
}

/// Variance multiplier of the multistage reference laws over the noise laws.
/// Wider than the noise keeps the change-of-measure weights square integrable.
pub const MS_Q_SCALE: f64 = 4.0;

fn wide() -> Dist {
    Dist::normal(0.0, MS_Q_SCALE)
}

/// Private states `x₁ⁱ = x₀ⁱ + u₀ⁱ + w₀ⁱ`, observations `y_tⁱ = x_tⁱ`, recall.
pub fn example7_team() -> (MultiStageTeam, Vec<ReferenceMeasure>) {
    let mut prims = PrimitiveSpace::new();
    let x0: Vec<usize> = (0..2).map(|i| prims.push(format!("x0_{}", i + 1), Dist::std_normal())).collect();
    let w0: Vec<usize> = (0..2).map(|i| prims.push(format!("w0_{}", i + 1), Dist::std_normal())).collect();
    let (x0a, w0a) = (x0.clone(), w0.clone());
    let team = MultiStageTeam {
        name: "example7_ms".into(),
        horizon: 2,
        agents: 2,
        primitives: prims,
        x0: Arc::new(move |p| x0a.iter().map(|k| p[*k][0]).collect()),
        dynamics: Arc::new(move |t, xs, us, p| (0..2).map(|i| xs[t][i] + us[t][i][0] + p[w0a[i]][0]).collect()),
        obs_dims: vec![vec![1, 1], vec![1, 1]],
        obs: Arc::new(|t, i, xs, _, _| vec![xs[t][i]]),
        obs_noise: vec![vec![None, None], vec![None, None]],
        obs_reads_actions: true,
        stage_cost: Arc::new(|t, x, u, _| {
            let own: f64 = u.iter().map(|a| a[0] * a[0]).sum();
            if t == 0 {
                own
            } else {
                (x[0] + x[1] + u[0][0] + u[1][0]).powi(2) + own
            }
        }),
        terminal_cost: Arc::new(|_| 0.0),
        info: (0..2)
            .map(|t| (0..2).map(|i| (0..=t).map(|s| MsSignal::Y { t: s, agent: i }).collect()).collect())
            .collect(),
        action_spaces: vec![ActionSpace::free(1), ActionSpace::free(1)],
    };
    let mut refs = Vec::new();
    for i in 0..2 {
        refs.push(ReferenceMeasure::additive_with_q(team.dm(0, i), x0[i], Dist::std_normal(), wide(), vec![], |_| vec![0.0]));
    }
    for i in 0..2 {
        let dm0 = team.dm(0, i);
        refs.push(ReferenceMeasure::additive_with_q(
            team.dm(1, i),
            w0[i],
            Dist::std_normal(),
            wide(),
            vec![Signal::Y(dm0), Signal::U(dm0)],
            |r| vec![r[0][0] + r[1][0]],
        ));
    }
    (team, refs)
}

/// `y1 = w0`, `y2 = (w2 + u1) mod 3` with `I2 = {y1, y2}`; actions in {0, 1, 2}.
pub fn finite_toy_problem() -> (TeamProblem, Vec<ReferenceMeasure>) {
    let mut prims = PrimitiveSpace::new();
    let w0 = prims.push("omega0", Dist::finite_scalar(&[0.0, 1.0, 2.0], &[0.5, 0.3, 0.2]));
    let noise = [0.6, 0.3, 0.1];
    let w2 = prims.push("omega2", Dist::finite_scalar(&[0.0, 1.0, 2.0], &noise));
    let problem = TeamProblem {
        name: "finite_toy".into(),
        primitives: prims,
        measurements: vec![
            MeasurementMap::identity(0, w0, 1),
            MeasurementMap::new(1, vec![Signal::Prim(w2), Signal::U(0)], 1, "(omega2 + u1) mod 3", |r| {
                vec![((r[0][0] + r[1][0]).round() as i64).rem_euclid(3) as f64]
            }),
        ],
        info: InformationStructure { sets: vec![vec![Signal::Y(0)], vec![Signal::Y(0), Signal::Y(1)]] },
        cost: CostFunction::new("toy", move |w, u| {
            let (a, b) = (u[0][0], u[1][0]);
            (b - w[w0][0]).powi(2) + 0.5 * (a + w[w2][0] - b).powi(2) + 0.25 * a * a
        }),
        action_spaces: vec![ActionSpace::boxed(vec![0.0], vec![2.0]), ActionSpace::boxed(vec![0.0], vec![2.0])],
    };
    let refs = vec![
        ReferenceMeasure::identity(0, Dist::finite_scalar(&[0.0, 1.0, 2.0], &[0.5, 0.3, 0.2])),
        ReferenceMeasure::modular(1, w2, noise.to_vec(), vec![Signal::U(0)], |r| r[0][0]),
    ];
    (problem, refs)
}

/// Uniformly random tabular policy on the toy's full information support.
pub fn random_toy_policy(rng: &mut crate::rng::Rng) -> Policy {
    let pts = [0.0, 1.0, 2.0];
    let keys1: Vec<Vec<f64>> = pts.iter().map(|x| vec![*x]).collect();
    let keys2: Vec<Vec<f64>> = pts.iter().flat_map(|a| pts.iter().map(move |b| vec![*a, *b])).collect();
    let mut draw = |n: usize| -> Vec<Vec<f64>> { (0..n).map(|_| vec![pts[rng.random_range(0..3)]]).collect() };
    let a1 = draw(keys1.len());
    let a2 = draw(keys2.len());
    Policy::new(vec![PolicyRep::Tabular { keys: keys1, actions: a1 }, PolicyRep::Tabular { keys: keys2, actions: a2 }])
}

// ---------------------------------------------------------------- registry

/// Build a scenario bundle by name with parameter overrides.
pub fn build(name: &str, params: &BTreeMap<String, f64>) -> Result<Scenario> {
    let params = resolve_params(name, params)?;
    let get = |k: &str| params[k];
    let mut policies = BTreeMap::new();
    let (model, expected) = match name {
        "example1" => {
            let alpha = get("alpha");
            if !(alpha > 0.0 && alpha < 1.0) {
                return Err(TeamError::Parameter(format!("example1 needs alpha in (0, 1), got {alpha}")));
            }
            let (problem, inv, refs) = example1_problem(alpha);
            policies.insert("s_star".into(), Policy::new(vec![affine2(&[0.0], 0.0), affine2(&[0.0, 1.0], 0.0)]));
            let s_star = &policies["s_star"];
            let s_form = make_form(&problem, &inv, &Form::S.into())?;
            let d_star = affinize_policy(&problem, &crate::reduction_dependent::transport_policy_s_to_d(&problem, &inv, s_star)?);
            let _ = s_form;
            policies.insert("d_star".into(), d_star);
            policies.insert("cs_star".into(), Policy::new(vec![affine2(&[0.0], 0.0), affine2(&[0.0, 1.0, 0.0], 0.0)]));
            policies.insert("probe".into(), probe_policy());
            let e = vec![
                exp("cost_invariance", "D vs PI", "probe", Verdict::Pass, "dynamic and change-of-measure costs agree within 3 SE"),
                exp("pbp_check_s", "S", "s_star", Verdict::Pass, "(0,(0,I)) is pbp optimal in the static form"),
                exp("best_response_d_dm1", "D", "d_star", Verdict::Unbounded, "with DM 2 frozen the D-form cost of DM 1 is −α(u1)², unbounded below"),
                exp("frozen_cost_d_dm1", "D", "d_star", Verdict::Pass, "J(u1 = t) = −α t² at t ∈ {1, 2, 4} within 1e-9"),
                exp("stationarity_d", "D", "d_star", Verdict::Pass, "the transported policy is stationary in D"),
                exp("condition_c_d", "D", "d_star", Verdict::Pass, "affine policy with a linear channel satisfies condition C"),
                exp("certificate_pi", "PI", "d_star", Verdict::Inconclusive, "the tilted cost is concave along u1, so no certificate"),
                exp("pbp_check_cs", "CS", "cs_star", Verdict::Pass, "(0,(0,1,0)) is pbp optimal with control sharing"),
                exp("pbp_check_cs_restricted_d", "D", "d_star", Verdict::Fail, "the CS optimum restricted to D-representable rules is not pbp optimal"),
            ];
            (ScenarioModel::Single { problem, inv: Some(inv), refs: Some(refs) }, e)
        }
        "example2" => {
            let (alpha, beta, shared) = (get("alpha"), get("beta"), get("shared"));
            if !(alpha > 0.0 && alpha < 1.0) {
                return Err(TeamError::Parameter(format!("example2 needs alpha in (0, 1), got {alpha}")));
            }
            if beta <= 1.0 {
                return Err(TeamError::Parameter(format!("example2 needs beta > 1, got {beta}")));
            }
            if shared != 0.0 && shared != 1.0 {
                return Err(TeamError::Parameter(format!("example2 needs shared in {{0, 1}}, got {shared}")));
            }
            let (problem, inv, refs) = example2_problem(alpha, beta, shared == 1.0);
            let d_star = Policy::new(vec![affine2(&[0.0], 0.0), affine2(&[0.0, 1.0], 0.0)]);
            let s_star = affinize_policy(&problem, &transport_policy_d_to_s(&problem, &inv, &d_star)?);
            policies.insert("d_star".into(), d_star);
            policies.insert("s_star".into(), s_star);
            policies.insert("probe".into(), probe_policy());
            policies.insert("dcs_lift".into(), Policy::new(vec![affine2(&[0.0], 0.0), affine2(&[0.0, 1.0, 0.0], 0.0)]));
            let mut e = Vec::new();
            if shared == 0.0 {
                e.push(exp("cost_invariance", "D vs PI", "probe", Verdict::Pass, "dynamic and change-of-measure costs agree within 3 SE"));
            }
            e.extend([
                exp("pbp_check_d", "D", "d_star", Verdict::Pass, "(0,(0,I)) is pbp optimal in D"),
                exp("pbp_check_s", "S", "s_star", Verdict::Fail, "the transported policy is not pbp optimal in S"),
                exp("pbp_check_s_dm1", "S", "s_star", Verdict::Fail, "DM 1 can improve in S"),
                exp("pbp_check_s_dm2", "S", "s_star", Verdict::Pass, "DM 2 cannot improve in S"),
                exp("curvature_d_dm1", "D", "d_star", Verdict::Pass, "frozen D-form cost in u1 has curvature α + β"),
                exp("curvature_d_dm2", "D", "d_star", Verdict::Pass, "frozen D-form cost in u2 has curvature β − 1"),
                exp("curvature_s_dm1", "S", "s_star", Verdict::Pass, "frozen S-form cost in u1 has curvature α − 1"),
                exp("pbp_check_dcs_lift", "D-CS", "dcs_lift", Verdict::Pass, "the D optimum lifted with shared actions stays pbp optimal"),
            ]);
            (ScenarioModel::Single { problem, inv: Some(inv), refs: if shared == 0.0 { Some(refs) } else { None } }, e)
        }
        "example3" => {
            let (problem, inv) = example3_problem();
            let d_star = Policy::new(vec![affine2(&[0.0], 0.0), affine2(&[0.0, 1.0], 0.0)]);
            let s_star = transport_policy_d_to_s(&problem, &inv, &d_star)?;
            policies.insert("d_star".into(), d_star);
            policies.insert("s_star".into(), s_star);
            let e = vec![
                exp("stationarity_d", "D", "d_star", Verdict::Pass, "(0,(0,I)) is stationary in D"),
                exp("stationarity_s", "S", "s_star", Verdict::Fail, "the transported policy is not stationary in S"),
                exp("stationarity_s_dm1_constant", "S", "s_star", Verdict::Pass, "the constant-direction residual of DM 1 in S equals 1 within 1e-6"),
                exp("condition_c_d", "D", "d_star", Verdict::Fail, "the √ channel breaks condition C"),
                exp("transport_pathwise", "D vs S", "d_star", Verdict::Pass, "transported policies take identical actions on every path"),
            ];
            (ScenarioModel::Single { problem, inv: Some(inv), refs: None }, e)
        }
        "example4" => {
            let (spread, c, c2) = (get("spread"), get("c"), get("c_prime"));
            if !(spread > 0.0) || c < 0.0 || c2 < 0.0 {
                return Err(TeamError::Parameter("example4 needs spread > 0 and nonnegative constants c, c_prime".into()));
            }
            let (problem, inv) = example4_problem(spread);
            let root = Policy::closure("(y2)^(1/4)", 1, |x| Ok(vec![fourth_root(x[1])]));
            let cs_root = Policy::closure("(yS2 + u1)^(1/4)", 1, |x| Ok(vec![fourth_root(x[1] + x[2])]));
            policies.insert("d_c".into(), Policy::new(vec![Policy::constant(1, vec![c]), root.clone()]));
            policies.insert("d_c_prime".into(), Policy::new(vec![Policy::constant(1, vec![c2]), root]));
            policies.insert("cs_c".into(), Policy::new(vec![Policy::constant(1, vec![c]), cs_root.clone()]));
            policies.insert("cs_c_prime".into(), Policy::new(vec![Policy::constant(1, vec![c2]), cs_root]));
            let e = vec![
                exp("convexity_d", "D", "d_c, d_c_prime", Verdict::Violation, "the D form is not convex in policies (chord gap > 0.01)"),
                exp("convexity_cs", "CS", "cs_c, cs_c_prime", Verdict::NoViolation, "the CS form is convex in policies"),
            ];
            (ScenarioModel::Single { problem, inv: Some(inv), refs: None }, e)
        }
        "example5_lqg" => {
            let k = get("coupling");
            let instances =
                vec![("scalar".to_string(), lqg_scalar(k)), ("vector".to_string(), lqg_vector(k)), ("literal".to_string(), lqg_vector(0.0))];
            let mut e = Vec::new();
            for (label, _) in &instances[..2] {
                let l = label.as_str();
                e.extend([
                    exp(&format!("gains_solvers_agree_{l}"), "S", "G", Verdict::Pass, "direct and fixed-point gain solves agree within 1e-8"),
                    exp(&format!("transport_pathwise_{l}"), "D vs S", "G, K", Verdict::Pass, "K and G take identical actions (sup diff ≤ 1e-9 over 1e4 paths)"),
                    exp(&format!("exact_cost_{l}"), "D vs S", "G, K", Verdict::Pass, "closed-form costs of G and K agree within 1e-10"),
                    exp(&format!("stationarity_s_{l}"), "S", "G", Verdict::Pass, "G is stationary in S with residuals ≤ 1e-8"),
                    exp(&format!("pbp_check_d_{l}"), "D", "K", Verdict::Pass, "K is pbp optimal in D over affine rules"),
                ]);
            }
            e.push(exp("zero_gains_literal", "S, D", "G, K", Verdict::Pass, "without a ζ–u cross term G = K = 0 and the costs agree"));
            (ScenarioModel::Lqg { instances }, e)
        }
        "example6_ms" => {
            let team = example6_config(get("a"), get("r")).build()?;
            if get("r") < 0.0 {
                return Err(TeamError::Parameter("example6_ms needs r ≥ 0".into()));
            }
            let refs = independent_data_refs_scaled(&team, MS_Q_SCALE)?;
            let e = vec![
                exp("nested", "dynamic", "-", Verdict::Pass, "private recall is nested in time"),
                exp("weights_normalized", "independent data", "zero", Verdict::Pass, "the stage density product has mean 1"),
                exp("cost_invariance", "dynamic vs independent data", "star", Verdict::Pass, "dynamic and reduced costs agree within 3 SE"),
                exp("dmpbp", "dynamic", "star", Verdict::Pass, "the iterated best response is DM-wise pbp optimal"),
                exp("agpbp", "dynamic", "star", Verdict::Pass, "it is also AG-wise pbp optimal"),
                exp("ordering", "dynamic", "star", Verdict::Pass, "AG-wise pass implies DM-wise pass"),
                exp("certificate", "independent data", "star", Verdict::Certified, "convex quadratic stage costs certify AG-wise optimality"),
                exp("finder_dmpbp", "dynamic", "finder", Verdict::Pass, "the found profile is DM-wise pbp optimal"),
                exp("finder_agpbp", "dynamic", "finder", Verdict::Fail, "the found profile is not AG-wise pbp optimal"),
                exp("finder_certificate", "identity", "finder", Verdict::Inconclusive, "the indefinite finder cost fails the chord test"),
                exp("finder_ordering", "dynamic", "finder", Verdict::Pass, "AG-wise pass implies DM-wise pass"),
            ];
            (ScenarioModel::Multi { team, refs }, e)
        }
        "example7_ms" => {
            let (team, refs) = example7_team();
            let e = vec![
                exp("nested", "dynamic", "-", Verdict::Pass, "each agent's information grows in time"),
                exp("weights_normalized", "AG-wise nested", "zero", Verdict::Pass, "the stage density product has mean 1"),
                exp("cost_invariance", "dynamic vs AG-wise nested", "star", Verdict::Pass, "dynamic and reduced costs agree within 3 SE"),
                exp("dmpbp", "dynamic", "star", Verdict::Pass, "the iterated best response is DM-wise pbp optimal"),
                exp("agpbp", "dynamic", "star", Verdict::Pass, "it is AG-wise pbp optimal"),
                exp("agpbp_reduced", "AG-wise nested", "star", Verdict::Pass, "the AG-wise verdict is the same after the reduction"),
                exp("ordering", "dynamic", "star", Verdict::Pass, "AG-wise pass implies DM-wise pass"),
            ];
            (ScenarioModel::Multi { team, refs }, e)
        }
        "finite_toy" => {
            let (problem, refs) = finite_toy_problem();
            policies.insert("probe".into(), random_toy_policy(&mut substream(7, stream_id("finite-toy-probe"), 0)));
            let e = vec![
                exp("cost_invariance_exact", "D vs PI", "10 random tabular", Verdict::Pass, "enumerated dynamic and reduced costs agree within 1e-12"),
                exp("bayes_consistency", "D vs PI", "random tabular", Verdict::Pass, "conditional costs agree atom by atom within 1e-12"),
                exp("pbp_check_optimum", "D", "optimum", Verdict::Pass, "the enumerated global optimum is pbp optimal"),
                exp("pbp_check_optimum_reduced", "PI", "optimum", Verdict::Pass, "and stays pbp optimal after the change of measure"),
            ];
            (ScenarioModel::Single { problem, inv: None, refs: Some(refs) }, e)
        }
        other => return Err(TeamError::Config(format!("unknown scenario '{other}'; known: {}", NAMES.join(", ")))),
    };
    Ok(Scenario { name: name.into(), params, model, policies, expected })
}

// ---------------------------------------------------------------- runners

/// Computed part of a check.
#[derive(Clone, Debug)]
struct Computed {
    id: String,
    verdict: Verdict,
    estimate: Option<f64>,
    std_error: Option<f64>,
    residuals: Option<Vec<ResidualRow>>,
    detail: String,
}

impl Computed {
    fn new(id: &str, verdict: Verdict, detail: impl Into<String>) -> Self {
        Computed { id: id.into(), verdict, estimate: None, std_error: None, residuals: None, detail: detail.into() }
    }

    fn value(mut self, mean: f64, se: f64) -> Self {
        self.estimate = Some(mean);
        self.std_error = Some(se);
        self
    }

    fn rows(mut self, rows: Vec<ResidualRow>) -> Self {
        self.residuals = Some(rows);
        self
    }
}

fn stationarity_rows(r: &StationarityReport) -> Vec<ResidualRow> {
    r.residuals
        .iter()
        .map(|x| ResidualRow {
            dm: x.dm + 1,
            direction: format!("u[{}]*{}", x.coord, x.direction),
            residual: x.estimate.mean,
            se: x.estimate.std_error,
        })
        .collect()
}

fn pbp_rows(r: &PbpReport) -> Vec<ResidualRow> {
    r.results
        .iter()
        .map(|b| ResidualRow {
            dm: b.dms[0] + 1,
            direction: format!("best-response{}", if b.dms.len() > 1 { "-group" } else { "" }),
            residual: if b.unbounded_below { f64::INFINITY } else { b.improvement.mean },
            se: b.improvement.std_error,
        })
        .collect()
}

fn pbp_detail(r: &PbpReport) -> String {
    if r.pass {
        "no group improves beyond tolerance".into()
    } else {
        let f: Vec<String> = r
            .failing
            .iter()
            .map(|k| {
                let b = &r.results[*k];
                let who = b.dms.iter().map(|d| (d + 1).to_string()).collect::<Vec<_>>().join("+");
                if b.unbounded_below {
                    format!("DM {who} unbounded below")
                } else {
                    format!("DM {who} improves by {:.4e}", b.improvement.mean)
                }
            })
            .collect();
        f.join("; ")
    }
}

fn pbp_computed(id: &str, r: &PbpReport) -> Computed {
    Computed::new(id, Verdict::of(r.pass), pbp_detail(r)).rows(pbp_rows(r))
}

fn br_verdict(b: &BestResponseResult) -> Verdict {
    if b.unbounded_below {
        Verdict::Unbounded
    } else {
        Verdict::of(b.passes())
    }
}

fn invariance(id: &str, reduced: &ReducedProblem, policy: &Policy, plan: &MonteCarloPlan) -> Result<Computed> {
    let (d, r, gap) = cost_gap(reduced, policy, plan)?;
    let ok = gap.mean.abs() <= 3.0 * gap.std_error + 1e-12;
    Ok(Computed::new(id, Verdict::of(ok), format!("J_dynamic {:.6} ± {:.2e}, J_reduced {:.6} ± {:.2e}", d.mean, d.std_error, r.mean, r.std_error))
        .value(gap.mean, gap.std_error))
}

/// Deterministic evaluator for closed-form checks on Gaussian/uniform primitives.
fn exact_plan(plan: &MonteCarloPlan) -> MonteCarloPlan {
    MonteCarloPlan { sampling: Sampling::Quadrature(8), ..plan.clone() }
}

fn curvature_check(id: &str, model: &TeamProblem, policy: &Policy, dm: usize, target: f64, plan: &MonteCarloPlan) -> Result<Computed> {
    let c = frozen_curvature(model, policy, dm, 0, &exact_plan(plan))?;
    Ok(Computed::new(id, Verdict::of((c - target).abs() <= 1e-6), format!("fitted {c:.9}, expected {target}")).value(c, 0.0))
}

fn run_example1(sc: &Scenario, plan: &MonteCarloPlan) -> Result<Vec<Computed>> {
    let ScenarioModel::Single { problem, inv: Some(inv), refs: Some(refs) } = &sc.model else { unreachable!() };
    let alpha = sc.params["alpha"];
    let (s_star, d_star, cs_star) = (&sc.policies["s_star"], &sc.policies["d_star"], &sc.policies["cs_star"]);
    let reduced = ReducedProblem::new(problem.clone(), refs.clone())?;
    let s_form = make_form(problem, inv, &Form::S.into())?;
    let cs_form = make_form(problem, inv, &Form::Cs.into())?;
    let mut out = vec![invariance("cost_invariance", &reduced, &sc.policies["probe"], plan)?];
    out.push(pbp_computed("pbp_check_s", &pbp_check(&s_form, s_star, plan, &BestResponseClass::Affine)?));
    let br = best_response(problem, d_star, 0, &BestResponseClass::Affine, plan)?;
    out.push(Computed::new("best_response_d_dm1", br_verdict(&br), format!("probe tail {:?}", br.probe.iter().rev().take(3).collect::<Vec<_>>())));
    let ts = [1.0, 2.0, 4.0];
    let js = frozen_cost_at(problem, d_star, 0, &ts.iter().map(|t| vec![*t]).collect::<Vec<_>>(), &exact_plan(plan))?;
    let err = ts.iter().zip(&js).fold(0.0f64, |m, (t, j)| m.max((j.mean + alpha * t * t).abs()));
    out.push(
        Computed::new("frozen_cost_d_dm1", Verdict::of(err <= 1e-9), format!("J(1), J(2), J(4) = {:.12}, {:.12}, {:.12}", js[0].mean, js[1].mean, js[2].mean))
            .value(err, 0.0),
    );
    let st = stationarity_check(problem, d_star, plan, &TestDirectionFamily::default(), None)?;
    out.push(Computed::new("stationarity_d", Verdict::of(st.pass), format!("max |residual| {:.3e}", st.max_abs())).rows(stationarity_rows(&st)));
    let cc = check_condition_c(problem, inv, d_star, plan)?;
    out.push(Computed::new("condition_c_d", Verdict::of(cc.pass), format!("max second difference {:.3e}", cc.max_second_difference)).value(cc.max_second_difference, 0.0));
    let cert = certify_global_optimality(&reduced, d_star, plan)?;
    out.push(certificate_computed("certificate_pi", cert.verdict, &cert.evidence));
    out.push(pbp_computed("pbp_check_cs", &pbp_check(&cs_form, cs_star, plan, &BestResponseClass::Affine)?));
    out.push(pbp_computed("pbp_check_cs_restricted_d", &pbp_check(problem, d_star, plan, &BestResponseClass::Affine)?));
    Ok(out)
}

fn certificate_computed(id: &str, v: CertificateVerdict, ev: &[crate::optimality::Evidence]) -> Computed {
    let verdict = match v {
        CertificateVerdict::Certified => Verdict::Certified,
        CertificateVerdict::Inconclusive => Verdict::Inconclusive,
    };
    let detail = ev.iter().map(|e| format!("{}: {} ({})", e.check, if e.pass { "ok" } else { "failed" }, e.detail)).collect::<Vec<_>>().join("; ");
    Computed::new(id, verdict, detail)
}

fn run_example2(sc: &Scenario, plan: &MonteCarloPlan) -> Result<Vec<Computed>> {
    let ScenarioModel::Single { problem, inv: Some(inv), refs } = &sc.model else { unreachable!() };
    let (alpha, beta) = (sc.params["alpha"], sc.params["beta"]);
    let (d_star, s_star, lift) = (&sc.policies["d_star"], &sc.policies["s_star"], &sc.policies["dcs_lift"]);
    let s_form = make_form(problem, inv, &Form::S.into())?;
    let dcs_form = make_form(problem, inv, &Form::DCs.into())?;
    let mut out = Vec::new();
    if let Some(refs) = refs {
        let reduced = ReducedProblem::new(problem.clone(), refs.clone())?;
        out.push(invariance("cost_invariance", &reduced, &sc.policies["probe"], plan)?);
    }
    out.push(pbp_computed("pbp_check_d", &pbp_check(problem, d_star, plan, &BestResponseClass::Affine)?));
    let s_pbp = pbp_check(&s_form, s_star, plan, &BestResponseClass::Affine)?;
    out.push(pbp_computed("pbp_check_s", &s_pbp));
    for (k, id) in ["pbp_check_s_dm1", "pbp_check_s_dm2"].iter().enumerate() {
        let b = &s_pbp.results[k];
        out.push(Computed::new(id, Verdict::of(b.passes()), if b.unbounded_below { "unbounded below".into() } else { format!("improvement {:.4e}", b.improvement.mean) }));
    }
    out.push(curvature_check("curvature_d_dm1", problem, d_star, 0, alpha + beta, plan)?);
    out.push(curvature_check("curvature_d_dm2", problem, d_star, 1, beta - 1.0, plan)?);
    out.push(curvature_check("curvature_s_dm1", &s_form, s_star, 0, alpha - 1.0, plan)?);
    out.push(pbp_computed("pbp_check_dcs_lift", &pbp_check(&dcs_form, lift, plan, &BestResponseClass::Affine)?));
    Ok(out)
}

fn run_example3(sc: &Scenario, plan: &MonteCarloPlan) -> Result<Vec<Computed>> {
    let ScenarioModel::Single { problem, inv: Some(inv), .. } = &sc.model else { unreachable!() };
    let (d_star, s_star) = (&sc.policies["d_star"], &sc.policies["s_star"]);
    let s_form = make_form(problem, inv, &Form::S.into())?;
    let mut out = Vec::new();
    let st = stationarity_check(problem, d_star, plan, &TestDirectionFamily::default(), None)?;
    out.push(Computed::new("stationarity_d", Verdict::of(st.pass), format!("max |residual| {:.3e}", st.max_abs())).rows(stationarity_rows(&st)));
    let ss = stationarity_check(&s_form, s_star, &exact_plan(plan), &TestDirectionFamily::default(), None)?;
    out.push(Computed::new("stationarity_s", Verdict::of(ss.pass), format!("max |residual| {:.3e}", ss.max_abs())).rows(stationarity_rows(&ss)));
    let r1 = ss.residual(0, 0, "1").map(|r| r.estimate.mean).unwrap_or(f64::NAN);
    out.push(Computed::new("stationarity_s_dm1_constant", Verdict::of((r1 - 1.0).abs() <= 1e-6), format!("residual {r1:.9}")).value(r1, 0.0));
    let cc = check_condition_c(problem, inv, d_star, plan)?;
    out.push(Computed::new("condition_c_d", Verdict::of(cc.pass), format!("max second difference {:.3e}", cc.max_second_difference)).value(cc.max_second_difference, 0.0));
    let (gap, cgap) = pathwise_action_gap(problem, d_star, &s_form, s_star, 10_000, plan.seed)?;
    out.push(Computed::new("transport_pathwise", Verdict::of(gap <= 1e-9 && cgap <= 1e-9), format!("action gap {gap:.3e}, cost gap {cgap:.3e}")).value(gap, 0.0));
    Ok(out)
}

fn run_example4(sc: &Scenario, plan: &MonteCarloPlan) -> Result<Vec<Computed>> {
    let ScenarioModel::Single { problem, inv: Some(inv), .. } = &sc.model else { unreachable!() };
    let cs_form = make_form(problem, inv, &Form::Cs.into())?;
    let grid = alpha_grid();
    let d = convexity_in_policies_check(problem, &sc.policies["d_c"], &sc.policies["d_c_prime"], &grid, plan)?;
    let dv = if d.violation && d.max_gap.mean > 0.01 { Verdict::Violation } else { Verdict::NoViolation };
    let mut out = vec![Computed::new("convexity_d", dv, format!("max chord gap {:.5} ± {:.1e} at α = {}", d.max_gap.mean, d.max_gap.std_error, d.argmax_alpha))
        .value(d.max_gap.mean, d.max_gap.std_error)];
    let c = convexity_in_policies_check(&cs_form, &sc.policies["cs_c"], &sc.policies["cs_c_prime"], &grid, plan)?;
    let cv = if c.violation { Verdict::Violation } else { Verdict::NoViolation };
    out.push(Computed::new("convexity_cs", cv, format!("max chord gap {:.3e} ± {:.1e} at α = {}", c.max_gap.mean, c.max_gap.std_error, c.argmax_alpha))
        .value(c.max_gap.mean, c.max_gap.std_error));
    Ok(out)
}

/// Gains, transport, exact-cost, stationarity and pbp checks of one LQG
/// team; ids carry `suffix`. Returns the checks, the gain pair and `(J_S, J_D)`.
fn lqg_instance_checks(team: &LqgTeam, suffix: &str, plan: &MonteCarloPlan, quad: &MonteCarloPlan) -> Result<(Vec<Computed>, crate::lqg::GainSet, f64, f64)> {
    let g = solve_static_gains(team)?;
    let gk = transport_gains_g_to_k(team, &g)?;
    let (gs, ks) = (gk.g.clone().unwrap_or_default(), gk.k.clone().unwrap_or_default());
    let cs = exact_cost(team, &gk, LqgForm::S)?;
    let cd = exact_cost(team, &gk, LqgForm::D)?;
    let mut out = Vec::new();
    let it = solve_static_gains_iterative(team, 100_000, 1e-14)?;
    let diff = gs.iter().zip(it.g.as_ref().unwrap_or(&Vec::new())).fold(0.0f64, |m, (a, b)| m.max((a - b).amax()));
    out.push(Computed::new(&format!("gains_solvers_agree{suffix}"), Verdict::of(diff <= 1e-8), format!("max gain difference {diff:.3e}")).value(diff, 0.0));
    let (d_problem, inv) = team.to_problem(&format!("lqg{suffix}"))?;
    let s_problem = make_form(&d_problem, &inv, &Form::S.into())?;
    let (g_pol, k_pol) = (gains_to_policy(&gs), gains_to_policy(&ks));
    let (gap, _) = pathwise_action_gap(&s_problem, &g_pol, &d_problem, &k_pol, 10_000, plan.seed)?;
    out.push(Computed::new(&format!("transport_pathwise{suffix}"), Verdict::of(gap <= 1e-9), format!("sup action difference {gap:.3e}")).value(gap, 0.0));
    out.push(Computed::new(&format!("exact_cost{suffix}"), Verdict::of((cs - cd).abs() <= 1e-10), format!("J_S {cs:.12}, J_D {cd:.12}")).value(cs - cd, 0.0));
    let st = stationarity_check(&s_problem, &g_pol, quad, &TestDirectionFamily::default(), Some(1e-8))?;
    out.push(Computed::new(&format!("stationarity_s{suffix}"), Verdict::of(st.pass), format!("max |residual| {:.3e}", st.max_abs())).rows(stationarity_rows(&st)));
    out.push(pbp_computed(&format!("pbp_check_d{suffix}"), &pbp_check(&d_problem, &k_pol, plan, &BestResponseClass::Affine)?));
    Ok((out, gk, cs, cd))
}

fn run_lqg(sc: &Scenario, plan: &MonteCarloPlan) -> Result<Vec<Computed>> {
    let ScenarioModel::Lqg { instances } = &sc.model else { unreachable!() };
    let mut out = Vec::new();
    for (label, team) in instances {
        if label == "literal" {
            let g = solve_static_gains(team)?;
            let gk = transport_gains_g_to_k(team, &g)?;
            let cs = exact_cost(team, &gk, LqgForm::S)?;
            let cd = exact_cost(team, &gk, LqgForm::D)?;
            let zero = gk.g.iter().chain(&gk.k).flatten().all(|m| m.amax() == 0.0);
            let ok = zero && (cs - cd).abs() <= 1e-10;
            out.push(Computed::new("zero_gains_literal", Verdict::of(ok), format!("max |G|, |K| = 0: {zero}; costs {cs:.12} vs {cd:.12}")));
            continue;
        }
        out.extend(lqg_instance_checks(team, &format!("_{label}"), plan, &exact_plan(plan))?.0);
    }
    Ok(out)
}

/// The LQG pipeline on a user configuration; every check is expected to pass.
pub fn lqg_pipeline(team: &LqgTeam, plan: &MonteCarloPlan) -> Result<(Vec<CheckOutcome>, serde_json::Value)> {
    plan.validate()?;
    let quad = MonteCarloPlan { sampling: Sampling::Quadrature(3), ..plan.clone() };
    let (computed, gk, cs, cd) = lqg_instance_checks(team, "", plan, &quad)?;
    let checks = computed
        .into_iter()
        .map(|c| CheckOutcome {
            scenario: "lqg".into(),
            id: c.id.clone(),
            form: if c.id.starts_with("pbp") { "D" } else if c.id.starts_with("stationarity") || c.id.starts_with("gains") { "S" } else { "D vs S" }.into(),
            policy: "G, K".into(),
            verdict: c.verdict,
            expected: Verdict::Pass,
            matched: c.verdict == Verdict::Pass,
            claim: c.id.replace('_', " "),
            estimate: c.estimate,
            std_error: c.std_error,
            residuals: c.residuals,
            detail: c.detail,
        })
        .collect();
    let extra = serde_json::json!({ "gains": crate::lqg::gains_json(team, &gk), "cost_s": cs, "cost_d": cd });
    Ok((checks, extra))
}

/// Plan for multistage checks: tensor Gauss–Hermite with three nodes, exact
/// for quadratic costs under affine policies.
fn ms_plan(plan: &MonteCarloPlan) -> MonteCarloPlan {
    MonteCarloPlan { sampling: Sampling::Quadrature(3), ..plan.clone() }
}

fn star_policy(team: &MultiStageTeam, plan: &MonteCarloPlan) -> Result<Policy> {
    let flat = team.to_team_problem()?;
    iterate_best_responses(&flat, &zero_policy(team)?, &ms_plan(plan), 200)
}

fn ms_common(team: &MultiStageTeam, refs: &[ReferenceMeasure], star: &Policy, plan: &MonteCarloPlan) -> Result<(Vec<Computed>, PbpReport, PbpReport)> {
    let flat = team.to_team_problem()?;
    let reduced = reduce(team, refs.to_vec())?;
    let qp = ms_plan(plan);
    let mut out = vec![Computed::new("nested", Verdict::of(check_agwise_nested(team)), "I_t^i ⊆ I_{t+1}^i for every agent")];
    let wm = weight_mean(&reduced, &zero_policy(team)?, plan)?;
    out.push(Computed::new("weights_normalized", Verdict::of((wm.mean - 1.0).abs() <= 3.0 * wm.std_error + 1e-12), format!("E_Q[w] = {:.6} ± {:.2e}", wm.mean, wm.std_error)).value(wm.mean, wm.std_error));
    out.push(invariance("cost_invariance", &reduced, star, plan)?);
    let dm = pbp_check_groups(&flat, star, &qp, &BestResponseClass::Affine, &(0..team.n_dms()).map(|d| vec![d]).collect::<Vec<_>>())?;
    let ag = pbp_check_groups(&flat, star, &qp, &BestResponseClass::Affine, &agwise_groups(team))?;
    out.push(pbp_computed("dmpbp", &dm));
    out.push(pbp_computed("agpbp", &ag));
    out.push(Computed::new("ordering", Verdict::of(!ag.pass || dm.pass), format!("AG-wise {}, DM-wise {}", ag.pass, dm.pass)));
    Ok((out, dm, ag))
}

fn run_example6(sc: &Scenario, plan: &MonteCarloPlan) -> Result<Vec<Computed>> {
    let ScenarioModel::Multi { team, refs } = &sc.model else { unreachable!() };
    let star = star_policy(team, plan)?;
    let (mut out, _, _) = ms_common(team, refs, &star, plan)?;
    let cert = certify_agwise_global(team, refs.clone(), &star, &ms_plan(plan), &BestResponseClass::Affine)?;
    out.push(certificate_computed("certificate", cert.verdict, &cert.evidence));
    let hit = find_dmwise_not_agwise().ok_or_else(|| TeamError::Config("finder produced no instance".into()))?;
    let ft = finder_team(&hit);
    let fp = Policy::new(vec![Policy::constant(0, vec![hit.point.0]), Policy::constant(0, vec![hit.point.1])]);
    let class = BestResponseClass::Tabular { grid: FINDER_GRID.iter().map(|x| vec![*x]).collect() };
    let ex = MonteCarloPlan { sampling: Sampling::Exact, ..plan.clone() };
    let fdm = dmwise_pbp_check(&ft, &fp, &ex, &class)?;
    let fag = crate::multistage::agwise_pbp_check(&ft, &fp, &ex, &class)?;
    let detail = format!("b = {}, d = {}, profile {:?} cost {}, joint best {:?} cost {}", hit.b, hit.d, hit.point, hit.point_cost, hit.best, hit.best_cost);
    out.push(pbp_computed("finder_dmpbp", &fdm));
    let mut c = pbp_computed("finder_agpbp", &fag);
    c.detail = format!("{}; {detail}", c.detail);
    out.push(c);
    let fc = certify_agwise_global(&ft, identity_refs(&ft)?, &fp, &ex, &class)?;
    out.push(certificate_computed("finder_certificate", fc.verdict, &fc.evidence));
    out.push(Computed::new("finder_ordering", Verdict::of(!fag.pass || fdm.pass), format!("AG-wise {}, DM-wise {}", fag.pass, fdm.pass)));
    Ok(out)
}

fn run_example7(sc: &Scenario, plan: &MonteCarloPlan) -> Result<Vec<Computed>> {
    let ScenarioModel::Multi { team, refs } = &sc.model else { unreachable!() };
    let star = star_policy(team, plan)?;
    let (mut out, _, _) = ms_common(team, refs, &star, plan)?;
    let reduced = reduce(team, refs.clone())?;
    let ag = pbp_check_groups(&reduced, &star, plan, &BestResponseClass::Affine, &agwise_groups(team))?;
    out.push(pbp_computed("agpbp_reduced", &ag));
    Ok(out)
}

fn run_finite_toy(sc: &Scenario, plan: &MonteCarloPlan) -> Result<Vec<Computed>> {
    let ScenarioModel::Single { problem, refs: Some(refs), .. } = &sc.model else { unreachable!() };
    let reduced = ReducedProblem::new(problem.clone(), refs.clone())?;
    let ex = MonteCarloPlan { sampling: Sampling::Exact, ..plan.clone() };
    let mut rng = substream(plan.seed, stream_id("finite-toy-policies"), 0);
    let policies: Vec<Policy> = (0..10).map(|_| random_toy_policy(&mut rng)).collect();
    let jd = evaluate_many(problem, &policies, &ex, stream_id("cost"), false)?;
    let jr = evaluate_many(&reduced, &policies, &ex, stream_id("cost"), false)?;
    let gap = jd.iter().zip(&jr).fold(0.0f64, |m, (a, b)| m.max((a.mean - b.mean).abs()));
    let mut out = vec![Computed::new("cost_invariance_exact", Verdict::of(gap <= 1e-12), format!("max |J_dynamic − J_reduced| over 10 policies {gap:.3e}")).value(gap, 0.0)];
    let mut bgap = 0.0f64;
    for dm in 0..2 {
        for (_, a, b) in bayes_consistency(&reduced, &policies[0], dm)? {
            bgap = bgap.max((a - b).abs());
        }
    }
    out.push(Computed::new("bayes_consistency", Verdict::of(bgap <= 1e-12), format!("max atom gap {bgap:.3e}")).value(bgap, 0.0));
    let class = BestResponseClass::Tabular { grid: vec![vec![0.0], vec![1.0], vec![2.0]] };
    let joint = crate::optimality::best_response_group(problem, &policies[0], &[0, 1], &class, &ex)?;
    let opt = joint.policy;
    out.push(pbp_computed("pbp_check_optimum", &pbp_check(problem, &opt, &ex, &class)?));
    out.push(pbp_computed("pbp_check_optimum_reduced", &pbp_check(&reduced, &opt, &ex, &class)?));
    Ok(out)
}

/// A multistage team with the policy and best-response class its checks use.
#[derive(Clone, Debug)]
pub struct MsInstance {
    pub team: MultiStageTeam,
    pub refs: Option<Vec<ReferenceMeasure>>,
    pub policy: Policy,
    pub class: BestResponseClass,
    /// Finite primitives: evaluate by enumeration.
    pub exact: bool,
}

pub const MS_BUILTINS: [&str; 3] = ["example6_ms", "example7_ms", "finder"];

pub const MS_CHECKS: [&str; 4] = ["agpbp", "dmpbp", "weights", "nested"];

/// Tensor quadrature beyond this many primitives costs more than sampling.
const MS_QUADRATURE_MAX_PRIMS: usize = 6;

fn ms_eval_plan(inst: &MsInstance, plan: &MonteCarloPlan) -> MonteCarloPlan {
    if inst.exact {
        MonteCarloPlan { sampling: Sampling::Exact, ..plan.clone() }
    } else if inst.team.primitives.vars.len() <= MS_QUADRATURE_MAX_PRIMS {
        ms_plan(plan)
    } else {
        plan.clone()
    }
}

/// Built-in multistage instance by name, or a linear-Gaussian config given as JSON.
pub fn ms_instance(source: &str, plan: &MonteCarloPlan) -> Result<MsInstance> {
    let with_star = |team: MultiStageTeam, refs: Option<Vec<ReferenceMeasure>>| -> Result<MsInstance> {
        let policy = star_policy(&team, plan)?;
        Ok(MsInstance { team, refs, policy, class: BestResponseClass::Affine, exact: false })
    };
    match source {
        "example6_ms" => {
            let team = example6_config(0.9, 0.5).build()?;
            let refs = independent_data_refs_scaled(&team, MS_Q_SCALE)?;
            with_star(team, Some(refs))
        }
        "example7_ms" => {
            let (team, refs) = example7_team();
            with_star(team, Some(refs))
        }
        "finder" => {
            let hit = find_dmwise_not_agwise().ok_or_else(|| TeamError::Config("finder produced no instance".into()))?;
            let team = finder_team(&hit);
            let refs = identity_refs(&team)?;
            let policy = Policy::new(vec![Policy::constant(0, vec![hit.point.0]), Policy::constant(0, vec![hit.point.1])]);
            let class = BestResponseClass::Tabular { grid: FINDER_GRID.iter().map(|x| vec![*x]).collect() };
            Ok(MsInstance { team, refs: Some(refs), policy, class, exact: true })
        }
        text => {
            let cfg: LinearGaussianConfig = serde_json::from_str(text).map_err(|e| {
                TeamError::Config(format!("multistage config is neither a built-in ({}) nor a linear-Gaussian JSON: {e}", MS_BUILTINS.join(", ")))
            })?;
            let team = cfg.build()?;
            let refs = independent_data_refs_scaled(&team, MS_Q_SCALE).ok();
            with_star(team, refs)
        }
    }
}

/// One of [`MS_CHECKS`] on a multistage instance; the expectation is a pass.
pub fn ms_check(inst: &MsInstance, check: &str, plan: &MonteCarloPlan) -> Result<CheckOutcome> {
    let name = inst.team.name.clone();
    let ep = ms_eval_plan(inst, plan);
    let c = match check {
        "nested" => Computed::new("nested", Verdict::of(check_agwise_nested(&inst.team)), "I_t^i ⊆ I_{t+1}^i for every agent"),
        "weights" => {
            let refs = inst.refs.clone().ok_or_else(|| TeamError::Config(format!("{name} has no independent-data reference measures")))?;
            let reduced = reduce(&inst.team, refs)?;
            let wp = if inst.exact { ep.clone() } else { plan.clone() };
            let wm = weight_mean(&reduced, &zero_policy(&inst.team)?, &wp)?;
            Computed::new("weights", Verdict::of((wm.mean - 1.0).abs() <= 3.0 * wm.std_error + 1e-12), format!("E_Q[w] = {:.6} ± {:.2e}", wm.mean, wm.std_error))
                .value(wm.mean, wm.std_error)
        }
        "dmpbp" => pbp_computed("dmpbp", &dmwise_pbp_check(&inst.team, &inst.policy, &ep, &inst.class)?),
        "agpbp" => pbp_computed("agpbp", &crate::multistage::agwise_pbp_check(&inst.team, &inst.policy, &ep, &inst.class)?),
        other => return Err(TeamError::Config(format!("unknown multistage check '{other}'; known: {}", MS_CHECKS.join(", ")))),
    };
    Ok(CheckOutcome {
        scenario: name,
        id: c.id.clone(),
        form: "dynamic".into(),
        policy: "star".into(),
        verdict: c.verdict,
        expected: Verdict::Pass,
        matched: c.verdict == Verdict::Pass,
        claim: format!("{check} holds"),
        estimate: c.estimate,
        std_error: c.std_error,
        residuals: c.residuals,
        detail: c.detail,
    })
}

/// D-form policy used by `reduce` when none is supplied.
pub fn default_reduce_policy(sc: &Scenario) -> Option<&Policy> {
    ["probe", "d_star", "d_c"].iter().find_map(|k| sc.policies.get(*k))
}

fn reduce_outcome(sc: &Scenario, id: &str, form: &str, c: Computed, claim: &str) -> CheckOutcome {
    CheckOutcome {
        scenario: sc.name.clone(),
        id: id.into(),
        form: form.into(),
        policy: "input".into(),
        verdict: c.verdict,
        expected: Verdict::Pass,
        matched: c.verdict == Verdict::Pass,
        claim: claim.into(),
        estimate: c.estimate,
        std_error: c.std_error,
        residuals: c.residuals,
        detail: c.detail,
    }
}

/// Reduce a scenario to `form` (`pi`, `pd`/`s`, `cs`, `dcs`, `d`) and check
/// that the reduction preserves the cost of a D-form `policy`. Returns the
/// check together with the reduced model and, for the policy-dependent
/// forms, the transported policy.
pub fn reduce_scenario(sc: &Scenario, form: &str, policy: Option<Policy>, plan: &MonteCarloPlan) -> Result<(CheckOutcome, serde_json::Value)> {
    use crate::report::{describe_problem, describe_refs, policy_json};
    use serde_json::json;
    plan.validate()?;
    let form = form.to_ascii_lowercase();
    match (&sc.model, form.as_str()) {
        (ScenarioModel::Single { problem, refs: Some(refs), .. }, "pi") => {
            let policy = policy.or_else(|| default_reduce_policy(sc).cloned()).ok_or_else(|| TeamError::Config("no policy given".into()))?;
            let reduced = ReducedProblem::new(problem.clone(), refs.clone())?;
            let c = invariance("cost_invariance", &reduced, &policy, plan)?;
            let wm = weight_mean(&reduced, &policy, plan)?;
            let mut model = describe_problem(problem);
            model["refs"] = describe_refs(refs, &problem.primitives)["refs"].clone();
            let extra = json!({ "form": "PI", "model": model, "weight_mean": wm.mean, "weight_mean_se": wm.std_error });
            Ok((reduce_outcome(sc, "cost_invariance", "D vs PI", c, "dynamic and change-of-measure costs agree within 3 SE"), extra))
        }
        (ScenarioModel::Multi { team, refs }, "pi") => {
            let policy = match policy {
                Some(p) => p,
                None => star_policy(team, plan)?,
            };
            let reduced = reduce(team, refs.clone())?;
            let c = invariance("cost_invariance", &reduced, &policy, plan)?;
            let extra = json!({ "form": "PI", "model": { "refs": describe_refs(refs, &team.primitives)["refs"].clone() } });
            Ok((reduce_outcome(sc, "cost_invariance", "dynamic vs PI", c, "dynamic and change-of-measure costs agree within 3 SE"), extra))
        }
        (ScenarioModel::Single { refs: None, .. }, "pi") => {
            Err(TeamError::UnsupportedForm(format!("{} has no policy-independent reference measures", sc.name)))
        }
        (ScenarioModel::Single { problem, inv: Some(inv), .. }, f @ ("pd" | "s" | "cs" | "dcs" | "d-cs" | "d")) => {
            let target = if f == "pd" { Form::S } else { Form::parse(f)? };
            let policy = policy.or_else(|| default_reduce_policy(sc).cloned()).ok_or_else(|| TeamError::Config("no policy given".into()))?;
            let tag = target.into();
            let form_problem = make_form(problem, inv, &tag)?;
            let moved = crate::reduction_dependent::transport_policy(problem, inv, &Form::D.into(), &tag, &policy)?;
            let moved = affinize_policy(&form_problem, &moved);
            let (gap, cgap) = pathwise_action_gap(problem, &policy, &form_problem, &moved, 10_000, plan.seed)?;
            let c = Computed::new("transport_pathwise", Verdict::of(gap <= 1e-9 && cgap <= 1e-9), format!("action gap {gap:.3e}, cost gap {cgap:.3e}"))
                .value(gap, 0.0);
            let extra = json!({ "form": target.name(), "model": describe_problem(&form_problem), "policy": policy_json(&moved) });
            Ok((reduce_outcome(sc, "transport_pathwise", &format!("D vs {}", target.name()), c, "the transported policy takes the same actions on every path"), extra))
        }
        (ScenarioModel::Single { inv: None, .. }, _) => {
            Err(TeamError::UnsupportedForm(format!("{} has no invertible observation decomposition", sc.name)))
        }
        (ScenarioModel::Lqg { .. }, _) => Err(TeamError::UnsupportedForm("LQG instances are reduced by the lqg command".into())),
        (ScenarioModel::Multi { .. }, f) => Err(TeamError::UnsupportedForm(format!("multistage scenarios support form pi only, not '{f}'"))),
        (_, f) => Err(TeamError::Config(format!("unknown form '{f}'; expected pi, pd, s, cs, dcs or d"))),
    }
}

/// Run every check of a scenario and compare with its expectations.
pub fn run_scenario(sc: &Scenario, plan: &MonteCarloPlan) -> Result<ScenarioReport> {
    plan.validate()?;
    let computed = match sc.name.as_str() {
        "example1" => run_example1(sc, plan)?,
        "example2" => run_example2(sc, plan)?,
        "example3" => run_example3(sc, plan)?,
        "example4" => run_example4(sc, plan)?,
        "example5_lqg" => run_lqg(sc, plan)?,
        "example6_ms" => run_example6(sc, plan)?,
        "example7_ms" => run_example7(sc, plan)?,
        "finite_toy" => run_finite_toy(sc, plan)?,
        other => return Err(TeamError::Config(format!("no runner for scenario '{other}'"))),
    };
    let checks: Vec<CheckOutcome> = sc
        .expected
        .iter()
        .map(|e| {
            let c = computed.iter().find(|c| c.id == e.id).cloned().unwrap_or_else(|| Computed::new(&e.id, Verdict::Fail, "not computed"));
            CheckOutcome {
                scenario: sc.name.clone(),
                id: e.id.clone(),
                form: e.form.clone(),
                policy: e.policy.clone(),
                verdict: c.verdict,
                expected: e.expected,
                matched: c.verdict == e.expected,
                claim: e.claim.clone(),
                estimate: c.estimate,
                std_error: c.std_error,
                residuals: c.residuals,
                detail: c.detail,
            }
        })
        .collect();
    let all_matched = checks.iter().all(|c| c.matched);
    Ok(ScenarioReport { scenario: sc.name.clone(), params: sc.params.clone(), checks, all_matched })
}
