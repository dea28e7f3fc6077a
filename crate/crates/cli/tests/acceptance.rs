//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit on any failure.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::Rng as _;
use rand_distr::StandardNormal;
use serde_json::Value;
use teamred::lqg::{solve_static_gains, transport_gains_g_to_k};
use teamred::multistage::{independent_data_refs_scaled, independent_data_weight, rollout, LinearGaussianConfig};
use teamred::optimality::evaluate_cost;
use teamred::reduction_independent::{cost_gap, evaluate_cost_reduced, ReducedProblem};
use teamred::rng::{stream_id, substream};
use teamred::scenarios::{example1_problem, example2_problem, finite_toy_problem, lqg_scalar, probe_policy, random_toy_policy, MS_Q_SCALE};
use teamred::{MonteCarloPlan, Policy};

const BIN: &str = env!("CARGO_BIN_EXE_teamred");

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

struct VerifyRun {
    status: i32,
    text: String,
    json: Value,
}

fn verify_all(dir: &Path, tag: &str, samples: Option<usize>, threads: Option<&str>) -> VerifyRun {
    let out = dir.join(format!("{tag}.json"));
    let mut cmd = Command::new(BIN);
    cmd.args(["verify", "--all", "--seed", "42", "--out"]).arg(&out);
    if let Some(n) = samples {
        cmd.args(["--samples", &n.to_string()]);
    }
    match threads {
        Some(t) => cmd.env("TEAMRED_THREADS", t),
        None => cmd.env_remove("TEAMRED_THREADS"),
    };
    let status = cmd.output().expect("teamred runs").status.code().unwrap_or(-1);
    let text = std::fs::read_to_string(&out).unwrap_or_default();
    let json = serde_json::from_str(&text).unwrap_or(Value::Null);
    VerifyRun { status, text, json }
}

struct Checks(BTreeMap<(String, String), Value>);

impl Checks {
    fn new(report: &Value) -> Self {
        let mut m = BTreeMap::new();
        for c in report["checks"].as_array().into_iter().flatten() {
            m.insert((c["scenario"].as_str().unwrap_or("").to_string(), c["id"].as_str().unwrap_or("").to_string()), c.clone());
        }
        Checks(m)
    }

    fn get(&self, scenario: &str, id: &str) -> Option<&Value> {
        self.0.get(&(scenario.to_string(), id.to_string()))
    }

    fn verdict(&self, scenario: &str, id: &str) -> String {
        self.get(scenario, id).and_then(|c| c["verdict"].as_str()).unwrap_or("missing").to_string()
    }

    fn estimate(&self, scenario: &str, id: &str) -> f64 {
        self.get(scenario, id).and_then(|c| c["estimate"].as_f64()).unwrap_or(f64::NAN)
    }

    /// Every listed (scenario, id, verdict) holds; returns the failures.
    fn expect(&self, list: &[(&str, &str, &str)]) -> Vec<String> {
        list.iter()
            .filter(|(s, id, v)| self.verdict(s, id) != *v)
            .map(|(s, id, v)| format!("{s}/{id} is {} (want {v})", self.verdict(s, id)))
            .collect()
    }
}

fn join(v: &[String]) -> String {
    v.join("; ")
}

fn criterion1(checks: &Checks) -> Outcome {
    let start = Instant::now();
    let (toy, refs) = finite_toy_problem();
    let reduced = ReducedProblem::new(toy.clone(), refs).unwrap();
    let exact = MonteCarloPlan::exact();
    let mut rng = substream(42, stream_id("acceptance-toy"), 0);
    let mut worst: f64 = 0.0;
    for _ in 0..10 {
        let p = random_toy_policy(&mut rng);
        let a = evaluate_cost(&toy, &p, &exact).unwrap().mean;
        let b = evaluate_cost_reduced(&reduced, &p, &exact).unwrap().mean;
        worst = worst.max((a - b).abs());
    }
    let plan = MonteCarloPlan::monte_carlo(100_000, 42);
    let mut gaps = Vec::new();
    for (name, (problem, _, refs)) in [("example1", example1_problem(0.5)), ("example2", example2_problem(0.5, 2.0, false))] {
        let reduced = ReducedProblem::new(problem, refs).unwrap();
        let (_, _, g) = cost_gap(&reduced, &probe_policy(), &plan).unwrap();
        gaps.push((name, g.mean, g.std_error));
    }
    let secs = start.elapsed().as_secs_f64();
    let mc_ok = gaps.iter().all(|(_, m, se)| m.abs() <= 3.0 * se);
    let reported = checks.expect(&[
        ("finite_toy", "cost_invariance_exact", "pass"),
        ("example1", "cost_invariance", "pass"),
        ("example2", "cost_invariance", "pass"),
    ]);
    let detail = format!(
        "toy max gap {worst:.1e}; {}; {secs:.2} s{}",
        gaps.iter().map(|(n, m, se)| format!("{n} gap {m:.2e} ± {se:.1e}")).collect::<Vec<_>>().join(", "),
        if reported.is_empty() { String::new() } else { format!("; {}", join(&reported)) }
    );
    outcome(worst <= 1e-12 && mc_ok && secs < 10.0 && reported.is_empty(), detail)
}

fn criterion2(checks: &Checks) -> Outcome {
    let fails = checks.expect(&[
        ("example1", "pbp_check_s", "pass"),
        ("example1", "best_response_d_dm1", "unbounded"),
        ("example1", "frozen_cost_d_dm1", "pass"),
        ("example1", "stationarity_d", "pass"),
    ]);
    let err = checks.estimate("example1", "frozen_cost_d_dm1");
    outcome(fails.is_empty() && err <= 1e-9, format!("frozen-cost error {err:.1e} at t = 1, 2, 4 {}", join(&fails)))
}

fn criterion3(checks: &Checks) -> Outcome {
    let mut fails = checks.expect(&[
        ("example2", "pbp_check_d", "pass"),
        ("example2", "pbp_check_s", "fail"),
        ("example2", "pbp_check_s_dm1", "fail"),
        ("example2", "pbp_check_s_dm2", "pass"),
    ]);
    let mut fitted = Vec::new();
    for (id, want) in [("curvature_d_dm1", 2.5), ("curvature_d_dm2", 1.0), ("curvature_s_dm1", -0.5)] {
        let got = checks.estimate("example2", id);
        fitted.push(format!("{got:.9}"));
        if !((got - want).abs() <= 1e-6) {
            fails.push(format!("{id} = {got} (want {want})"));
        }
    }
    outcome(fails.is_empty(), format!("curvatures {} {}", fitted.join(", "), join(&fails)))
}

fn criterion4(checks: &Checks) -> Outcome {
    let mut fails = checks.expect(&[("example3", "stationarity_d", "pass"), ("example3", "stationarity_s", "fail")]);
    let r = checks.estimate("example3", "stationarity_s_dm1_constant");
    if !((r - 1.0).abs() <= 1e-6) {
        fails.push(format!("constant-direction residual {r}"));
    }
    outcome(fails.is_empty(), format!("S-form residual {r:.9} {}", join(&fails)))
}

fn criterion5(checks: &Checks) -> Outcome {
    let mut fails = checks.expect(&[("example4", "convexity_d", "violation"), ("example4", "convexity_cs", "no_violation")]);
    let gap = checks.estimate("example4", "convexity_d");
    if !(gap > 0.01) {
        fails.push(format!("D gap {gap}"));
    }
    let d = checks.get("example4", "convexity_d").and_then(|c| c["detail"].as_str()).unwrap_or("").to_string();
    outcome(fails.is_empty(), format!("u1 = 0 vs u1 = 0.25, u2 = (y2)^(1/4): {d} {}", join(&fails)))
}

/// Zooming grid search of `1 + G1² + G2² + 2 G1 + 2 G2`, the scalar team cost
/// `E[ζ² + u1² + u2² + 2 u1 ζ + 2 u2 ζ]` with `u_i = G_i ζ` and `E ζ² = 1`.
fn scalar_brute_force() -> (f64, f64) {
    let f = |a: f64, b: f64| 1.0 + a * a + b * b + 2.0 * a + 2.0 * b;
    let (mut c, mut w) = ((0.0, 0.0), 4.0);
    for _ in 0..14 {
        let step = w / 20.0;
        let mut best = (f64::INFINITY, c);
        for i in -20..=20 {
            for j in -20..=20 {
                let p = (c.0 + i as f64 * step, c.1 + j as f64 * step);
                let v = f(p.0, p.1);
                if v < best.0 {
                    best = (v, p);
                }
            }
        }
        c = best.1;
        w = 2.0 * step;
    }
    c
}

fn criterion6(checks: &Checks) -> Outcome {
    let team = lqg_scalar(1.0);
    let g = transport_gains_g_to_k(&team, &solve_static_gains(&team).unwrap()).unwrap();
    let gs: Vec<f64> = g.g.as_ref().unwrap().iter().map(|m| m[(0, 0)]).collect();
    let oracle = scalar_brute_force();
    let diff = (gs[0] - oracle.0).abs().max((gs[1] - oracle.1).abs());
    let mut fails = checks.expect(&[
        ("example5_lqg", "transport_pathwise_scalar", "pass"),
        ("example5_lqg", "exact_cost_scalar", "pass"),
        ("example5_lqg", "stationarity_s_scalar", "pass"),
        ("example5_lqg", "pbp_check_d_scalar", "pass"),
        ("example5_lqg", "transport_pathwise_vector", "pass"),
        ("example5_lqg", "exact_cost_vector", "pass"),
        ("example5_lqg", "stationarity_s_vector", "pass"),
        ("example5_lqg", "pbp_check_d_vector", "pass"),
        ("example5_lqg", "zero_gains_literal", "pass"),
    ]);
    if diff > 1e-6 {
        fails.push(format!("solver {gs:?} vs brute force {oracle:?}"));
    }
    let path = checks.estimate("example5_lqg", "transport_pathwise_scalar");
    let cost = checks.estimate("example5_lqg", "exact_cost_scalar");
    outcome(
        fails.is_empty(),
        format!("G = ({:.6}, {:.6}), brute-force gap {diff:.1e}, pathwise {path:.1e}, cost gap {cost:.1e} {}", gs[0], gs[1], join(&fails)),
    )
}

fn criterion7(checks: &Checks) -> Outcome {
    let fails = checks.expect(&[
        ("example2", "pbp_check_dcs_lift", "pass"),
        ("example1", "pbp_check_cs", "pass"),
        ("example1", "pbp_check_cs_restricted_d", "fail"),
    ]);
    outcome(fails.is_empty(), format!("example2 lift passes, example1 restriction fails {}", join(&fails)))
}

/// Product of stage weights against `N(y; (I−A)⁻¹m, v(I−A)⁻¹(I−A)⁻ᵀ) / ∏ N(y_k; 0, 4v)`
/// on a controlled two-stage, two-agent instance with affine stage-0 rules.
fn density_ratio_gap() -> f64 {
    let (a, b, c, v) = (0.8, [0.6, -0.4], [1.0, 0.5], 0.9);
    let (g, h) = ([0.7, -1.1], [0.2, -0.3]);
    let cfg = LinearGaussianConfig {
        name: "acceptance".into(),
        horizon: 2,
        agents: 2,
        a,
        b: b.to_vec(),
        c: c.to_vec(),
        x0_var: 1.0,
        w_var: 0.5,
        v_var: v,
        q: 1.0,
        r: 0.5,
        s: 1.0,
        q_terminal: 0.0,
        info: "recall".into(),
    };
    let team = cfg.build().unwrap();
    let refs = independent_data_refs_scaled(&team, MS_Q_SCALE).unwrap();
    let policy = Policy::new(vec![
        Policy::affine_row(&[g[0]], h[0]),
        Policy::affine_row(&[g[1]], h[1]),
        Policy::affine_row(&[0.2, 0.3], 0.0),
        Policy::affine_row(&[-0.5, 0.1], 0.2),
    ]);
    let mut amat = DMatrix::zeros(4, 4);
    for i in 0..2 {
        for j in 0..2 {
            amat[(2 + i, j)] = c[i] * b[j] * g[j];
        }
    }
    let inv = (DMatrix::identity(4, 4) - amat).try_inverse().unwrap();
    let cov = &inv * inv.transpose() * v;
    let chol = cov.cholesky().unwrap();
    let logdet: f64 = 2.0 * chol.l().diagonal().iter().map(|d| d.ln()).sum::<f64>();
    let ln2pi = (2.0 * std::f64::consts::PI).ln();
    let qv = MS_Q_SCALE * v;
    let sds = [1.0, 0.5f64.sqrt(), v.sqrt(), v.sqrt(), v.sqrt(), v.sqrt()];
    let mut rng = substream(42, stream_id("acceptance-density"), 0);
    let mut worst: f64 = 0.0;
    for _ in 0..500 {
        let prims: Vec<Vec<f64>> = sds.iter().map(|s| vec![s * rng.sample::<f64, _>(StandardNormal)]).collect();
        let traj = rollout(&team, &policy, &prims).unwrap();
        let y = DVector::from_iterator(4, traj.ys.iter().flatten().map(|x| x[0]));
        let drift = a * prims[0][0] + prims[1][0] + b[0] * h[0] + b[1] * h[1];
        let m = DVector::from_column_slice(&[c[0] * prims[0][0], c[1] * prims[0][0], c[0] * drift, c[1] * drift]);
        let z = chol.l().solve_lower_triangular(&(&y - &inv * m)).unwrap();
        let log_p = -0.5 * (z.norm_squared() + logdet + 4.0 * ln2pi);
        let log_q: f64 = y.iter().map(|x| -0.5 * (x * x / qv + (qv).ln() + ln2pi)).sum();
        let oracle = (log_p - log_q).exp();
        let w = independent_data_weight(&team, &refs, &prims, &traj).unwrap();
        worst = worst.max((w - oracle).abs() / (1.0 + oracle));
    }
    worst
}

fn criterion8(checks: &Checks) -> Outcome {
    let gap = density_ratio_gap();
    let mut fails = checks.expect(&[
        ("example6_ms", "ordering", "pass"),
        ("example6_ms", "finder_ordering", "pass"),
        ("example7_ms", "ordering", "pass"),
        ("example6_ms", "finder_dmpbp", "pass"),
        ("example6_ms", "finder_agpbp", "fail"),
        ("example6_ms", "finder_certificate", "inconclusive"),
        ("example6_ms", "certificate", "certified"),
    ]);
    if !(gap <= 1e-10) {
        fails.push(format!("density ratio gap {gap:.3e}"));
    }
    outcome(fails.is_empty(), format!("weight vs closed-form ratio {gap:.1e}; finder inconclusive, example6 certified {}", join(&fails)))
}

fn strip_timestamp(text: &str) -> String {
    text.lines().filter(|l| !l.trim_start().starts_with("\"timestamp\"")).collect::<Vec<_>>().join("\n")
}

/// Largest difference between numbers at the same place in two reports;
/// infinite when the structures differ.
fn max_numeric_diff(a: &Value, b: &Value) -> f64 {
    match (a, b) {
        (Value::Number(x), Value::Number(y)) => (x.as_f64().unwrap() - y.as_f64().unwrap()).abs(),
        (Value::Array(x), Value::Array(y)) if x.len() == y.len() => x.iter().zip(y).map(|(p, q)| max_numeric_diff(p, q)).fold(0.0, f64::max),
        (Value::Object(x), Value::Object(y)) if x.len() == y.len() => x
            .iter()
            .map(|(k, v)| if k == "timestamp" { 0.0 } else { y.get(k).map_or(f64::INFINITY, |w| max_numeric_diff(v, w)) })
            .fold(0.0, f64::max),
        (x, y) if x == y => 0.0,
        _ => f64::INFINITY,
    }
}

fn criterion9(dir: &Path) -> Outcome {
    let a = verify_all(dir, "repro-a", None, Some("1"));
    let b = verify_all(dir, "repro-b", None, Some("1"));
    let c = verify_all(dir, "repro-c", None, Some("3"));
    let ok_runs = [&a, &b, &c].iter().all(|r| r.status == 0 && !r.text.is_empty());
    let identical = strip_timestamp(&a.text) == strip_timestamp(&b.text);
    let diff = max_numeric_diff(&a.json, &c.json);
    outcome(
        ok_runs && identical && diff <= 1e-12,
        format!(
            "exit codes {}/{}/{}; repeat byte-identical: {identical}; 1 vs 3 threads max diff {diff:.1e}",
            a.status, b.status, c.status
        ),
    )
}

fn main() {
    let dir = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("acceptance");
    std::fs::create_dir_all(&dir).expect("scratch directory");
    let start = Instant::now();
    let full = verify_all(&dir, "verify-all-1e5", Some(100_000), None);
    eprintln!("verify --all --samples 100000 --seed 42: exit {} in {:.0} s", full.status, start.elapsed().as_secs_f64());
    let checks = Checks::new(&full.json);
    let mismatched: Vec<String> = full.json["checks"]
        .as_array()
        .into_iter()
        .flatten()
        .filter(|c| c["matched"] != Value::Bool(true))
        .map(|c| format!("{}/{}", c["scenario"].as_str().unwrap_or(""), c["id"].as_str().unwrap_or("")))
        .collect();
    if full.status != 0 || !mismatched.is_empty() {
        eprintln!("verify --all mismatches: {}", mismatched.join(", "));
    }

    let results: Vec<(u32, &str, Outcome)> = vec![
        (1, "cost invariance under the policy-independent reduction", criterion1(&checks)),
        (2, "example1 verdict pattern", criterion2(&checks)),
        (3, "example2 verdict pattern and curvatures", criterion3(&checks)),
        (4, "example3 stationarity residual", criterion4(&checks)),
        (5, "example4 convexity in policies", criterion5(&checks)),
        (6, "LQG gains, transport, costs, stationarity, pbp", criterion6(&checks)),
        (7, "control-sharing lift and restriction", criterion7(&checks)),
        (8, "multistage weights, ordering, finder and certificate", criterion8(&checks)),
        (9, "reproducibility across runs and thread counts", criterion9(&dir)),
    ];
    let mut all = full.status == 0;
    for (k, name, o) in &results {
        println!("criterion {k}: {} | {name} | {}", if o.pass { "PASS" } else { "FAIL" }, o.detail.trim_end());
        all &= o.pass;
    }
    println!("acceptance: {} in {:.0} s", if all { "PASS" } else { "FAIL" }, start.elapsed().as_secs_f64());
    if !all {
        std::process::exit(1);
    }
}
