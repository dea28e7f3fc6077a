//! Numerical tests of stationarity, person-by-person optimality, convexity in
//! policies and sufficient conditions for global optimality.
//!
//! Every check is generic over [`PathModel`], so the same code runs on any
//! dynamic form and on the change-of-measure form.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::error::{config, Result};
use crate::model_core::{same_point, Override, PathModel, Policy, PolicyRep};
use crate::montecarlo::{grid, integrate, Estimate, MonteCarloPlan, Sampling};
use crate::reduction_independent::{weight_flatness_residual, ReducedProblem};
use crate::rng::{child, stream_id, substream};

/// Stationarity tolerance: 1e-3 under sampling, 1e-9 for deterministic rules.
pub fn stationarity_tol(plan: &MonteCarloPlan) -> f64 {
    if plan.is_deterministic() {
        1e-9
    } else {
        1e-3
    }
}

/// Person-by-person tolerance on the best-response improvement.
pub fn pbp_tol(j: f64) -> f64 {
    1e-3 * (1.0 + j.abs())
}

/// Test functions δ_k of a DM's information vector.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct TestDirectionFamily {
    pub linear: bool,
    pub quadratic: bool,
}

impl Default for TestDirectionFamily {
    fn default() -> Self {
        TestDirectionFamily { linear: true, quadratic: true }
    }
}

impl TestDirectionFamily {
    pub fn constants_only() -> Self {
        TestDirectionFamily { linear: false, quadratic: false }
    }

    pub fn labels(&self, d: usize) -> Vec<String> {
        let mut out = vec!["1".to_string()];
        if self.linear {
            out.extend((0..d).map(|i| format!("x{i}")));
        }
        if self.quadratic {
            for i in 0..d {
                for j in i..d {
                    out.push(format!("x{i}*x{j}"));
                }
            }
        }
        out
    }

    pub fn eval(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![1.0];
        if self.linear {
            out.extend_from_slice(x);
        }
        if self.quadratic {
            for i in 0..x.len() {
                for j in i..x.len() {
                    out.push(x[i] * x[j]);
                }
            }
        }
        out
    }
}

/// One weak-form residual: DM, action coordinate, test direction.
#[derive(Clone, Debug, Serialize)]
pub struct Residual {
    pub dm: usize,
    pub coord: usize,
    pub direction: String,
    pub estimate: Estimate,
}

impl Residual {
    pub fn passes(&self, tol: f64) -> bool {
        self.estimate.mean.abs() <= tol + 3.0 * self.estimate.std_error
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct StationarityReport {
    pub residuals: Vec<Residual>,
    pub dm_pass: Vec<bool>,
    pub tol: f64,
    pub pass: bool,
}

impl StationarityReport {
    pub fn residual(&self, dm: usize, coord: usize, direction: &str) -> Option<&Residual> {
        self.residuals.iter().find(|r| r.dm == dm && r.coord == coord && r.direction == direction)
    }

    pub fn max_abs(&self) -> f64 {
        self.residuals.iter().fold(0.0, |m, r| m.max(r.estimate.mean.abs()))
    }
}

/// Expected cost (or tilted cost) of the policy.
pub fn evaluate_cost(model: &dyn PathModel, policy: &Policy, plan: &MonteCarloPlan) -> Result<Estimate> {
    evaluate_cost_on(model, policy, plan, stream_id("cost"))
}

pub fn evaluate_cost_on(model: &dyn PathModel, policy: &Policy, plan: &MonteCarloPlan, stream: u64) -> Result<Estimate> {
    let est = integrate(&model.sampling_dists(), plan, stream, 1, |p, _| {
        Ok(vec![model.run(policy, p, Override::None, false)?.value])
    })?;
    Ok(est[0])
}

/// Expected cost of several policies on common random numbers.
pub fn evaluate_many(model: &dyn PathModel, policies: &[Policy], plan: &MonteCarloPlan, stream: u64, project: bool) -> Result<Vec<Estimate>> {
    integrate(&model.sampling_dists(), plan, stream, policies.len(), |p, _| {
        policies.iter().map(|pol| Ok(model.run(pol, p, Override::None, project)?.value)).collect()
    })
}

/// Expected cost with the listed DM actions fixed to constants.
pub fn frozen_cost_at(model: &dyn PathModel, policy: &Policy, dm: usize, actions: &[Vec<f64>], plan: &MonteCarloPlan) -> Result<Vec<Estimate>> {
    let n = model.n_dms();
    integrate(&model.sampling_dists(), plan, stream_id("frozen-cost"), actions.len(), |p, _| {
        actions
            .iter()
            .map(|a| {
                let mut fixed = vec![None; n];
                fixed[dm] = Some(a.clone());
                Ok(model.run(policy, p, Override::Set(&fixed), false)?.value)
            })
            .collect()
    })
}

/// Expected cost along constant shifts `u^dm = γ^dm(I^dm) + t e_coord`.
pub fn frozen_cost_curve(model: &dyn PathModel, policy: &Policy, dm: usize, coord: usize, ts: &[f64], plan: &MonteCarloPlan) -> Result<Vec<Estimate>> {
    let du = model.action_dim(dm);
    integrate(&model.sampling_dists(), plan, stream_id("frozen-curve"), ts.len(), |p, _| {
        ts.iter()
            .map(|t| {
                let mut d = vec![0.0; du];
                d[coord] = *t;
                Ok(model.run(policy, p, Override::Shift { dm, delta: &d }, false)?.value)
            })
            .collect()
    })
}

/// Least-squares quadratic `a + b t + c t²` through the points; returns (a, b, c).
pub fn fit_quadratic(ts: &[f64], js: &[f64]) -> (f64, f64, f64) {
    let x = DMatrix::from_fn(ts.len(), 3, |r, c| ts[r].powi(c as i32));
    let y = DVector::from_column_slice(js);
    let coef = (x.transpose() * &x).lu().solve(&(x.transpose() * y)).unwrap_or_else(|| DVector::zeros(3));
    (coef[0], coef[1], coef[2])
}

/// Curvature coefficient of the frozen cost along u^dm (shifts −2…2).
pub fn frozen_curvature(model: &dyn PathModel, policy: &Policy, dm: usize, coord: usize, plan: &MonteCarloPlan) -> Result<f64> {
    let ts = [-2.0, -1.0, 0.0, 1.0, 2.0];
    let js: Vec<f64> = frozen_cost_curve(model, policy, dm, coord, &ts, plan)?.iter().map(|e| e.mean).collect();
    Ok(fit_quadratic(&ts, &js).2)
}

/// Pathwise derivative of the integrand in u^dm_coord, one-sided at box edges.
fn pathwise_derivative(model: &dyn PathModel, policy: &Policy, p: &[Vec<f64>], dm: usize, coord: usize, u: f64, base: f64, h: f64) -> Result<f64> {
    let du = model.action_dim(dm);
    let space = model.action_space(dm);
    let (lo, hi) = (space.lo[coord], space.hi[coord]);
    let mut d = vec![0.0; du];
    let run = |delta: f64, d: &mut Vec<f64>| -> Result<f64> {
        d[coord] = delta;
        Ok(model.run(policy, p, Override::Shift { dm, delta: d }, false)?.value)
    };
    let up_ok = u + h <= hi;
    let dn_ok = u - h >= lo;
    Ok(match (up_ok, dn_ok) {
        (true, true) => (run(h, &mut d)? - run(-h, &mut d)?) / (2.0 * h),
        (true, false) => (run(h, &mut d)? - base) / h,
        (false, true) => (base - run(-h, &mut d)?) / h,
        (false, false) => 0.0,
    })
}

/// Weak-form stationarity: for each DM, `E[∂_{u^i} value · δ_k(I^i)]` with
/// the deviation propagated through downstream measurements and frozen
/// downstream policies.
pub fn stationarity_check(model: &dyn PathModel, policy: &Policy, plan: &MonteCarloPlan, tests: &TestDirectionFamily, tol: Option<f64>) -> Result<StationarityReport> {
    let n = model.n_dms();
    let tol = tol.unwrap_or_else(|| stationarity_tol(plan));
    let layout: Vec<(usize, usize, Vec<String>)> =
        (0..n).map(|dm| (dm, model.action_dim(dm), tests.labels(model.info_dim(dm)))).collect();
    let width: usize = layout.iter().map(|(_, du, l)| du * l.len()).sum();
    let h = plan.fd_step;
    let est = integrate(&model.sampling_dists(), plan, stream_id("stationarity"), width, |p, _| {
        let base = model.run(policy, p, Override::None, false)?;
        let mut row = Vec::with_capacity(width);
        for (dm, du, _) in &layout {
            let phi = tests.eval(&base.infos[*dm]);
            let analytic = model.pathwise_gradient(&base, *dm);
            for a in 0..*du {
                let g = match &analytic {
                    Some(g) => g[a],
                    None => pathwise_derivative(model, policy, p, *dm, a, base.us[*dm][a], base.value, h)?,
                };
                row.extend(phi.iter().map(|f| g * f));
            }
        }
        Ok(row)
    })?;
    let mut residuals = Vec::with_capacity(width);
    let mut idx = 0;
    for (dm, du, labels) in &layout {
        for a in 0..*du {
            for l in labels {
                residuals.push(Residual { dm: *dm, coord: a, direction: l.clone(), estimate: est[idx] });
                idx += 1;
            }
        }
    }
    let dm_pass: Vec<bool> =
        (0..n).map(|dm| residuals.iter().filter(|r| r.dm == dm).all(|r| r.passes(tol))).collect();
    let pass = dm_pass.iter().all(|b| *b);
    Ok(StationarityReport { residuals, dm_pass, tol, pass })
}

/// Policy class searched by a best response.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub enum BestResponseClass {
    /// `u = W · info + b` over the DM's full information vector.
    Affine,
    /// Any map from information atoms to the listed actions (finite supports).
    Tabular { grid: Vec<Vec<f64>> },
}

#[derive(Clone, Debug, Serialize)]
pub struct BestResponseResult {
    pub dms: Vec<usize>,
    pub method: String,
    pub j_old: Estimate,
    pub j_new: Estimate,
    /// `J(old) − J(best response)`; infinite when unbounded below.
    pub improvement: Estimate,
    pub unbounded_below: bool,
    /// Parameter-space ray along which the probe decreased without bound.
    pub ray: Option<Vec<f64>>,
    /// Probe values `J(θ₀ + 2^k ray)`, k = 0…20.
    pub probe: Vec<f64>,
    #[serde(skip)]
    pub policy: Policy,
}

impl BestResponseResult {
    pub fn passes(&self) -> bool {
        !self.unbounded_below
            && self.improvement.mean <= pbp_tol(self.j_old.mean) + 3.0 * self.improvement.std_error
    }
}

/// Affine parameter layout for a group of DMs.
struct AffineLayout {
    dms: Vec<usize>,
    dims: Vec<(usize, usize)>,
}

impl AffineLayout {
    fn new(model: &dyn PathModel, dms: &[usize]) -> Self {
        let dims = dms.iter().map(|dm| (model.action_dim(*dm), model.info_dim(*dm))).collect();
        AffineLayout { dms: dms.to_vec(), dims }
    }

    fn len(&self) -> usize {
        self.dims.iter().map(|(du, d)| du * (d + 1)).sum()
    }

    fn theta_of(&self, policy: &Policy) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.len());
        for (dm, (du, d)) in self.dms.iter().zip(&self.dims) {
            match &policy.entries[*dm] {
                PolicyRep::Affine { gain, bias } if gain.len() == *du && gain.iter().all(|r| r.len() == *d) => {
                    for (row, b) in gain.iter().zip(bias) {
                        out.extend_from_slice(row);
                        out.push(*b);
                    }
                }
                _ => out.extend(std::iter::repeat_n(0.0, du * (d + 1))),
            }
        }
        out
    }

    fn build(&self, base: &Policy, theta: &[f64]) -> Policy {
        let mut p = base.clone();
        let mut k = 0;
        for (dm, (du, d)) in self.dms.iter().zip(&self.dims) {
            let mut gain = Vec::with_capacity(*du);
            let mut bias = Vec::with_capacity(*du);
            for _ in 0..*du {
                gain.push(theta[k..k + d].to_vec());
                bias.push(theta[k + d]);
                k += d + 1;
            }
            p.entries[*dm] = PolicyRep::Affine { gain, bias };
        }
        p
    }
}

fn axpy(theta: &[f64], t: f64, dir: &[f64]) -> Vec<f64> {
    theta.iter().zip(dir).map(|(a, b)| a + t * b).collect()
}

const PROBE_STEPS: usize = 21;

/// Decreases along the probe at least double over each of the last five doublings.
fn probe_unbounded(js: &[f64]) -> bool {
    let d: Vec<f64> = js.windows(2).map(|w| w[0] - w[1]).collect();
    let m = d.len();
    m >= 6 && (m - 5..m).all(|k| d[k] > 0.0 && d[k] >= 2.0 * d[k - 1] * (1.0 - 1e-6) && d[k - 1] > 0.0)
}

fn run_probe(model: &dyn PathModel, layout: &AffineLayout, base: &Policy, theta0: &[f64], ray: &[f64], plan: &MonteCarloPlan, stream: u64) -> Result<Vec<f64>> {
    let pols: Vec<Policy> =
        (0..PROBE_STEPS).map(|k| layout.build(base, &axpy(theta0, 2f64.powi(k as i32), ray))).collect();
    Ok(evaluate_many(model, &pols, plan, stream, true)?.iter().map(|e| e.mean).collect())
}

fn holdout_plan(plan: &MonteCarloPlan, stream: u64) -> (MonteCarloPlan, u64) {
    if plan.is_deterministic() {
        (plan.clone(), stream)
    } else {
        (plan.clone(), child(stream, 0x401d))
    }
}

/// Paired `J(old) − J(new)` on the holdout stream.
fn paired_improvement(model: &dyn PathModel, old: &Policy, new: &Policy, plan: &MonteCarloPlan, stream: u64) -> Result<(Estimate, Estimate, Estimate)> {
    let (hp, hs) = holdout_plan(plan, stream);
    let est = integrate(&model.sampling_dists(), &hp, hs, 3, |p, _| {
        let a = model.run(old, p, Override::None, false)?.value;
        let b = model.run(new, p, Override::None, true)?.value;
        Ok(vec![a, b, a - b])
    })?;
    Ok((est[0], est[1], est[2]))
}

/// Best response of one DM within the class.
pub fn best_response(model: &dyn PathModel, policy: &Policy, dm: usize, class: &BestResponseClass, plan: &MonteCarloPlan) -> Result<BestResponseResult> {
    best_response_group(model, policy, &[dm], class, plan)
}

/// Joint best response of a group of DMs with everyone else frozen.
pub fn best_response_group(model: &dyn PathModel, policy: &Policy, dms: &[usize], class: &BestResponseClass, plan: &MonteCarloPlan) -> Result<BestResponseResult> {
    if dms.is_empty() || dms.iter().any(|d| *d >= model.n_dms()) {
        return config("best response needs a nonempty group of valid DMs");
    }
    let key = dms.iter().fold(stream_id("best-response"), |s, d| child(s, *d as u64));
    match class {
        BestResponseClass::Affine => affine_best_response(model, policy, dms, plan, key),
        BestResponseClass::Tabular { grid } => tabular_best_response(model, policy, dms, grid, key),
    }
}

fn affine_best_response(model: &dyn PathModel, policy: &Policy, dms: &[usize], plan: &MonteCarloPlan, stream: u64) -> Result<BestResponseResult> {
    let layout = AffineLayout::new(model, dms);
    let p = layout.len();
    let theta0 = layout.theta_of(policy);
    let s = 1.0;
    let mut rng = substream(plan.seed, stream, u64::MAX);
    let checks: Vec<Vec<f64>> = (0..2).map(|_| (0..p).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()).collect();
    let mut points: Vec<Vec<f64>> = vec![theta0.clone()];
    for a in 0..p {
        let mut e = vec![0.0; p];
        e[a] = s;
        points.push(axpy(&theta0, 1.0, &e));
        points.push(axpy(&theta0, -1.0, &e));
    }
    for a in 0..p {
        for b in a + 1..p {
            let mut e = vec![0.0; p];
            e[a] = s;
            e[b] = s;
            points.push(axpy(&theta0, 1.0, &e));
        }
    }
    for c in &checks {
        points.push(axpy(&theta0, s, c));
    }
    let pols: Vec<Policy> = points.iter().map(|t| layout.build(policy, t)).collect();
    let js: Vec<f64> = evaluate_many(model, &pols, plan, stream, false)
        .or_else(|_| evaluate_many(model, &pols, plan, stream, true))?
        .iter()
        .map(|e| e.mean)
        .collect();
    let j0 = js[0];
    let mut g = DVector::zeros(p);
    let mut hm = DMatrix::zeros(p, p);
    for a in 0..p {
        let (jp, jm) = (js[1 + 2 * a], js[2 + 2 * a]);
        g[a] = (jp - jm) / (2.0 * s);
        hm[(a, a)] = (jp + jm - 2.0 * j0) / (s * s);
    }
    let mut idx = 1 + 2 * p;
    for a in 0..p {
        for b in a + 1..p {
            let v = (js[idx] - js[1 + 2 * a] - js[1 + 2 * b] + j0) / (s * s);
            hm[(a, b)] = v;
            hm[(b, a)] = v;
            idx += 1;
        }
    }
    let scale = 1.0 + js.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let quadratic = checks.iter().enumerate().all(|(c, dir)| {
        let d = DVector::from_column_slice(dir) * s;
        let pred = j0 + g.dot(&d) + 0.5 * (d.transpose() * &hm * &d)[(0, 0)];
        (pred - js[idx + c]).abs() <= 1e-7 * scale
    });
    if quadratic {
        let eig = SymmetricEigen::new(hm.clone());
        let lmax = eig.eigenvalues.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let (imin, lmin) = eig
            .eigenvalues
            .iter()
            .enumerate()
            .fold((0, f64::INFINITY), |acc, (i, v)| if *v < acc.1 { (i, *v) } else { acc });
        let cut = 1e-9 * (1.0 + lmax);
        let mut ray: Option<Vec<f64>> = None;
        if lmin < -cut {
            let mut v: Vec<f64> = eig.eigenvectors.column(imin).iter().copied().collect();
            if g.iter().zip(&v).map(|(a, b)| a * b).sum::<f64>() > 0.0 {
                v.iter_mut().for_each(|x| *x = -*x);
            }
            ray = Some(v);
        }
        let mut delta = DVector::zeros(p);
        if ray.is_none() {
            for (k, l) in eig.eigenvalues.iter().enumerate() {
                if *l > cut {
                    let v = eig.eigenvectors.column(k);
                    delta -= v * (v.dot(&g) / l);
                }
            }
            let resid = &hm * &delta + &g;
            if resid.norm() > 1e-8 * (1.0 + g.norm()) * scale {
                let r: Vec<f64> = resid.iter().map(|x| -x).collect();
                let norm = r.iter().map(|x| x * x).sum::<f64>().sqrt();
                ray = Some(r.iter().map(|x| x / norm).collect());
            }
        }
        if let Some(r) = ray {
            let probe = run_probe(model, &layout, policy, &theta0, &r, plan, stream)?;
            if probe_unbounded(&probe) {
                return Ok(unbounded_result(model, policy, dms, plan, stream, r, probe, "affine-normal-equations")?);
            }
            return descent_best_response(model, policy, &layout, theta0, plan, stream, Some(probe));
        }
        let theta: Vec<f64> = theta0.iter().zip(delta.iter()).map(|(a, b)| a + b).collect();
        let new = layout.build(policy, &theta);
        let (j_old, j_new, imp) = paired_improvement(model, policy, &new, plan, stream)?;
        return Ok(BestResponseResult {
            dms: dms.to_vec(),
            method: "affine-normal-equations".into(),
            j_old,
            j_new,
            improvement: imp,
            unbounded_below: false,
            ray: None,
            probe: Vec::new(),
            policy: new,
        });
    }
    descent_best_response(model, policy, &layout, theta0, plan, stream, None)
}

#[allow(clippy::too_many_arguments)]
fn unbounded_result(model: &dyn PathModel, policy: &Policy, dms: &[usize], plan: &MonteCarloPlan, stream: u64, ray: Vec<f64>, probe: Vec<f64>, method: &str) -> Result<BestResponseResult> {
    let j_old = evaluate_cost_on(model, policy, plan, stream)?;
    Ok(BestResponseResult {
        dms: dms.to_vec(),
        method: method.into(),
        j_old,
        j_new: Estimate { mean: f64::NEG_INFINITY, std_error: 0.0, n: j_old.n },
        improvement: Estimate { mean: f64::INFINITY, std_error: 0.0, n: j_old.n },
        unbounded_below: true,
        ray: Some(ray),
        probe,
        policy: policy.clone(),
    })
}

/// Coordinate pattern search with three starts on a bounded search sample.
fn descent_best_response(model: &dyn PathModel, policy: &Policy, layout: &AffineLayout, theta0: Vec<f64>, plan: &MonteCarloPlan, stream: u64, prior_probe: Option<Vec<f64>>) -> Result<BestResponseResult> {
    let p = layout.len();
    let mut search = plan.clone();
    if !search.is_deterministic() {
        search.samples = search.samples.min(4096);
    }
    let eval = |theta: &[f64]| -> Result<f64> {
        let pol = layout.build(policy, theta);
        Ok(evaluate_many(model, std::slice::from_ref(&pol), &search, stream, true)?[0].mean)
    };
    let mut rng = substream(plan.seed, stream, u64::MAX - 1);
    let mut starts = vec![theta0.clone()];
    for _ in 0..2 {
        starts.push(theta0.iter().map(|t| t + rng.sample::<f64, _>(StandardNormal)).collect());
    }
    let mut best_theta = theta0.clone();
    let mut best_j = eval(&theta0)?;
    let mut evals = 0usize;
    for start in starts {
        let mut theta = start;
        let mut j = eval(&theta)?;
        let mut step = 1.0;
        while step > 1e-4 && evals < 1500 {
            let mut moved = false;
            for a in 0..p {
                for sgn in [1.0, -1.0] {
                    let mut t = theta.clone();
                    t[a] += sgn * step;
                    let jt = eval(&t)?;
                    evals += 1;
                    if jt < j - 1e-12 * (1.0 + j.abs()) {
                        theta = t;
                        j = jt;
                        moved = true;
                        break;
                    }
                }
            }
            if !moved {
                step *= 0.5;
            }
        }
        if j < best_j {
            best_j = j;
            best_theta = theta;
        }
    }
    let dir: Vec<f64> = best_theta.iter().zip(&theta0).map(|(a, b)| a - b).collect();
    let norm = dir.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        let ray: Vec<f64> = dir.iter().map(|x| x / norm).collect();
        let probe = run_probe(model, layout, policy, &theta0, &ray, &search, stream)?;
        if probe_unbounded(&probe) {
            return unbounded_result(model, policy, &layout.dms, plan, stream, ray, probe, "affine-coordinate-descent");
        }
    }
    let new = layout.build(policy, &best_theta);
    let (j_old, j_new, imp) = paired_improvement(model, policy, &new, plan, stream)?;
    Ok(BestResponseResult {
        dms: layout.dms.clone(),
        method: "affine-coordinate-descent".into(),
        j_old,
        j_new,
        improvement: imp,
        unbounded_below: false,
        ray: None,
        probe: prior_probe.unwrap_or_default(),
        policy: new,
    })
}

/// Largest number of joint tabular assignments enumerated by a group response.
pub const MAX_TABULAR_ASSIGNMENTS: usize = 1 << 20;

fn tabular_best_response(model: &dyn PathModel, policy: &Policy, dms: &[usize], grid_actions: &[Vec<f64>], _stream: u64) -> Result<BestResponseResult> {
    if grid_actions.is_empty() {
        return config("tabular best response needs a nonempty action grid");
    }
    let nodes = grid(&model.sampling_dists(), Sampling::Exact)
        .map_err(|_| crate::error::TeamError::Config("tabular best response requires finite-support sampling".into()))?;
    let n = model.n_dms();
    let j_old: f64 = nodes.iter().map(|(pt, w)| Ok(w * model.run(policy, pt, Override::None, false)?.value)).sum::<Result<f64>>()?;
    let (new, j_new) = if dms.len() == 1 {
        let dm = dms[0];
        let mut atoms: Vec<Vec<f64>> = Vec::new();
        let mut table: Vec<Vec<f64>> = Vec::new();
        for (pt, w) in &nodes {
            let info = model.run(policy, pt, Override::None, false)?.infos[dm].clone();
            let idx = match atoms.iter().position(|a| same_point(a, &info)) {
                Some(i) => i,
                None => {
                    atoms.push(info);
                    table.push(vec![0.0; grid_actions.len()]);
                    atoms.len() - 1
                }
            };
            for (g, a) in grid_actions.iter().enumerate() {
                let mut fixed = vec![None; n];
                fixed[dm] = Some(a.clone());
                table[idx][g] += w * model.run(policy, pt, Override::Set(&fixed), false)?.value;
            }
        }
        let mut actions = Vec::with_capacity(atoms.len());
        let mut total = 0.0;
        for row in &table {
            let mut best = 0;
            for g in 1..row.len() {
                if row[g] < row[best] {
                    best = g;
                }
            }
            total += row[best];
            actions.push(grid_actions[best].clone());
        }
        (policy.with_entry(dm, PolicyRep::Tabular { keys: atoms, actions }), total)
    } else {
        group_tabular(model, policy, dms, grid_actions, &nodes)?
    };
    let imp = j_old - j_new;
    Ok(BestResponseResult {
        dms: dms.to_vec(),
        method: "tabular-exact".into(),
        j_old: Estimate::exact(j_old),
        j_new: Estimate::exact(j_new),
        improvement: Estimate::exact(imp),
        unbounded_below: false,
        ray: None,
        probe: Vec::new(),
        policy: new,
    })
}

/// Joint enumeration over every (DM, reachable atom) slot of the group.
fn group_tabular(model: &dyn PathModel, policy: &Policy, dms: &[usize], grid_actions: &[Vec<f64>], nodes: &[(Vec<Vec<f64>>, f64)]) -> Result<(Policy, f64)> {
    let n = model.n_dms();
    let mut atoms: Vec<Vec<Vec<f64>>> = vec![Vec::new(); dms.len()];
    let combos_group = grid_actions.len().checked_pow(dms.len() as u32).unwrap_or(usize::MAX);
    if combos_group > MAX_TABULAR_ASSIGNMENTS {
        return config("group too large for tabular enumeration");
    }
    for (pt, _) in nodes {
        for c in 0..combos_group {
            let mut fixed = vec![None; n];
            let mut r = c;
            for dm in dms {
                fixed[*dm] = Some(grid_actions[r % grid_actions.len()].clone());
                r /= grid_actions.len();
            }
            let o = model.run(policy, pt, Override::Set(&fixed), false)?;
            for (k, dm) in dms.iter().enumerate() {
                if !atoms[k].iter().any(|a| same_point(a, &o.infos[*dm])) {
                    atoms[k].push(o.infos[*dm].clone());
                }
            }
        }
    }
    let slots: usize = atoms.iter().map(Vec::len).sum();
    let total = grid_actions.len().checked_pow(slots as u32).unwrap_or(usize::MAX);
    if total > MAX_TABULAR_ASSIGNMENTS {
        return config(format!("{total} joint tabular assignments exceed the cap"));
    }
    let mut best: Option<(Policy, f64)> = None;
    for c in 0..total {
        let mut r = c;
        let mut cand = policy.clone();
        for (k, dm) in dms.iter().enumerate() {
            let acts: Vec<Vec<f64>> = atoms[k]
                .iter()
                .map(|_| {
                    let a = grid_actions[r % grid_actions.len()].clone();
                    r /= grid_actions.len();
                    a
                })
                .collect();
            cand.entries[*dm] = PolicyRep::Tabular { keys: atoms[k].clone(), actions: acts };
        }
        let j: f64 = nodes.iter().map(|(pt, w)| Ok(w * model.run(&cand, pt, Override::None, false)?.value)).sum::<Result<f64>>()?;
        if best.as_ref().is_none_or(|(_, bj)| j < *bj) {
            best = Some((cand, j));
        }
    }
    best.ok_or_else(|| crate::error::TeamError::Config("empty tabular search".into()))
}

#[derive(Clone, Debug, Serialize)]
pub struct PbpReport {
    pub results: Vec<BestResponseResult>,
    pub pass: bool,
    pub failing: Vec<usize>,
}

/// Person-by-person check: a best response for every DM in turn.
pub fn pbp_check(model: &dyn PathModel, policy: &Policy, plan: &MonteCarloPlan, class: &BestResponseClass) -> Result<PbpReport> {
    let groups: Vec<Vec<usize>> = (0..model.n_dms()).map(|d| vec![d]).collect();
    pbp_check_groups(model, policy, plan, class, &groups)
}

/// Person-by-person check over arbitrary deviation groups.
pub fn pbp_check_groups(model: &dyn PathModel, policy: &Policy, plan: &MonteCarloPlan, class: &BestResponseClass, groups: &[Vec<usize>]) -> Result<PbpReport> {
    let mut results = Vec::with_capacity(groups.len());
    let mut failing = Vec::new();
    for (k, g) in groups.iter().enumerate() {
        let r = best_response_group(model, policy, g, class, plan)?;
        if !r.passes() {
            failing.push(k);
        }
        results.push(r);
    }
    Ok(PbpReport { pass: failing.is_empty(), results, failing })
}

/// Repeated DM-wise affine best responses, each accepted only when it improves.
pub fn iterate_best_responses(model: &dyn PathModel, policy: &Policy, plan: &MonteCarloPlan, rounds: usize) -> Result<Policy> {
    let mut cur = policy.clone();
    for _ in 0..rounds {
        let mut moved = false;
        for dm in 0..model.n_dms() {
            let r = best_response(model, &cur, dm, &BestResponseClass::Affine, plan)?;
            if r.unbounded_below {
                return config(format!("best response of DM {} is unbounded below", dm + 1));
            }
            if r.improvement.mean > 1e-12 * (1.0 + r.j_old.mean.abs()) {
                cur = r.policy;
                moved = true;
            }
        }
        if !moved {
            break;
        }
    }
    Ok(cur)
}

#[derive(Clone, Debug, Serialize)]
pub struct ConvexityReport {
    pub alphas: Vec<f64>,
    /// `J(mix_α) − [α J(γ) + (1 − α) J(γ')]` per α.
    pub gaps: Vec<Estimate>,
    pub max_gap: Estimate,
    pub argmax_alpha: f64,
    /// Positive gap beyond three standard errors.
    pub violation: bool,
}

/// Chord test of the expected cost along action-level policy mixtures.
pub fn convexity_in_policies_check(model: &dyn PathModel, gamma: &Policy, gamma_prime: &Policy, alphas: &[f64], plan: &MonteCarloPlan) -> Result<ConvexityReport> {
    let est = integrate(&model.sampling_dists(), plan, stream_id("convexity"), alphas.len(), |p, _| {
        let a = model.run(gamma, p, Override::None, false)?.value;
        let b = model.run(gamma_prime, p, Override::None, false)?.value;
        alphas
            .iter()
            .map(|al| {
                let m = model.run(gamma, p, Override::Mixture { other: gamma_prime, alpha: *al }, false)?.value;
                Ok(m - (al * a + (1.0 - al) * b))
            })
            .collect()
    })?;
    let (k, max_gap) = est
        .iter()
        .copied()
        .enumerate()
        .fold((0, est[0]), |acc, (i, e)| if e.mean > acc.1.mean { (i, e) } else { acc });
    let violation = max_gap.mean > 3.0 * max_gap.std_error && max_gap.mean > 1e-12;
    Ok(ConvexityReport { alphas: alphas.to_vec(), gaps: est, max_gap, argmax_alpha: alphas[k], violation })
}

/// Default mixture grid {0, 0.1, …, 1}.
pub fn alpha_grid() -> Vec<f64> {
    (0..=10).map(|k| k as f64 / 10.0).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum CertificateVerdict {
    Certified,
    Inconclusive,
}

#[derive(Clone, Debug, Serialize)]
pub struct Evidence {
    pub check: String,
    pub pass: bool,
    pub detail: String,
}

#[derive(Clone, Debug, Serialize)]
pub struct Certificate {
    pub verdict: CertificateVerdict,
    pub evidence: Vec<Evidence>,
}

/// Number of sampled points in the tilted-cost chord test.
pub const CHORD_POINTS: usize = 1000;

/// Chord convexity of the tilted cost in the listed DMs' actions at sampled
/// reduced points; the remaining DMs follow the policy.
pub fn tilted_chord_test(reduced: &ReducedProblem, policy: &Policy, dms: &[usize], seed: u64) -> Result<(bool, f64)> {
    let dists = reduced.sampling_dists();
    let n = reduced.n();
    let mut rng = substream(seed, stream_id("tilted-chord"), 0);
    let mut worst: f64 = f64::NEG_INFINITY;
    for _ in 0..CHORD_POINTS {
        let pt: Vec<Vec<f64>> = dists.iter().map(|d| d.sample(&mut rng)).collect();
        let base = reduced.run(policy, &pt, Override::None, false)?;
        let draw = |rng: &mut crate::rng::Rng| -> Vec<Option<Vec<f64>>> {
            let mut fixed = vec![None; n];
            for dm in dms {
                let space = reduced.action_space(*dm);
                let mut u: Vec<f64> = base.us[*dm]
                    .iter()
                    .map(|x| x + (1.0 + x.abs()) * rng.sample::<f64, _>(StandardNormal))
                    .collect();
                space.project(&mut u);
                fixed[*dm] = Some(u);
            }
            fixed
        };
        let fa = draw(&mut rng);
        let fb = draw(&mut rng);
        let al: f64 = rng.random();
        let fm: Vec<Option<Vec<f64>>> = fa
            .iter()
            .zip(&fb)
            .map(|(a, b)| match (a, b) {
                (Some(a), Some(b)) => Some(a.iter().zip(b).map(|(x, y)| al * x + (1.0 - al) * y).collect()),
                _ => None,
            })
            .collect();
        let ca = reduced.run(policy, &pt, Override::Set(&fa), false)?.value;
        let cb = reduced.run(policy, &pt, Override::Set(&fb), false)?.value;
        let cm = reduced.run(policy, &pt, Override::Set(&fm), false)?.value;
        let scale = 1.0 + ca.abs().max(cb.abs());
        worst = worst.max((cm - (al * ca + (1.0 - al) * cb)) / scale);
    }
    Ok((worst <= 1e-9, worst))
}

/// Finiteness of the cost and weight pairings against five random affine
/// comparison policies for the listed DMs.
pub fn finiteness_pairings(reduced: &ReducedProblem, policy: &Policy, dms: &[usize], plan: &MonteCarloPlan) -> Result<(bool, String)> {
    let h = plan.fd_step;
    let mut rng = substream(plan.seed, stream_id("pairings"), 0);
    let mut all_finite = true;
    let mut worst: f64 = 0.0;
    for k in 0..5 {
        let mut cmp = policy.clone();
        for dm in dms {
            let du = reduced.action_dim(*dm);
            let d = reduced.info_dim(*dm);
            let gain = (0..du).map(|_| (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()).collect();
            let bias = (0..du).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
            cmp.entries[*dm] = PolicyRep::Affine { gain, bias };
        }
        let width = 2 * dms.len();
        let est = integrate(&reduced.sampling_dists(), plan, child(stream_id("pairings"), k), width, |p, _| {
            let base = reduced.run(policy, p, Override::None, false)?;
            let alt = reduced.run(&cmp, p, Override::None, true)?;
            let mut row = Vec::with_capacity(width);
            for dm in dms {
                let du = reduced.action_dim(*dm);
                let mut dc = 0.0;
                let mut dw = 0.0;
                for a in 0..du {
                    let diff = alt.us[*dm][a] - base.us[*dm][a];
                    let mut plus: Vec<Option<Vec<f64>>> = base.us.iter().cloned().map(Some).collect();
                    let mut minus = plus.clone();
                    if let (Some(up), Some(dn)) = (plus[*dm].as_mut(), minus[*dm].as_mut()) {
                        up[a] += h;
                        dn[a] -= h;
                    }
                    let op = reduced.run(policy, p, Override::Set(&plus), true)?;
                    let om = reduced.run(policy, p, Override::Set(&minus), true)?;
                    dc += (op.cost - om.cost) / (2.0 * h) * diff;
                    dw += (op.weight - om.weight) / (2.0 * h) * base.cost * diff;
                }
                row.push(dc * base.weight);
                row.push(dw);
            }
            Ok(row)
        });
        match est {
            Ok(v) => {
                for e in v {
                    worst = worst.max(e.mean.abs());
                    all_finite &= e.mean.is_finite() && e.std_error.is_finite();
                }
            }
            Err(_) => all_finite = false,
        }
    }
    Ok((all_finite, format!("largest |pairing| {worst:.3e}")))
}

/// Sufficient-condition certificate for global optimality in a reduced form.
pub fn certify_global_optimality(reduced: &ReducedProblem, policy: &Policy, plan: &MonteCarloPlan) -> Result<Certificate> {
    let n = reduced.n();
    let dms: Vec<usize> = (0..n).collect();
    let mut evidence = Vec::new();
    let st = stationarity_check(reduced, policy, plan, &TestDirectionFamily::default(), None)?;
    evidence.push(Evidence {
        check: "stationarity (reduced form)".into(),
        pass: st.pass,
        detail: format!("max |residual| {:.3e}", st.max_abs()),
    });
    let mut flat_ok = true;
    let mut flat_max: f64 = 0.0;
    for dm in 0..n {
        let f = weight_flatness_residual(reduced, policy, dm, &TestDirectionFamily::default(), plan)?;
        flat_ok &= f.pass;
        flat_max = f.residuals.iter().fold(flat_max, |m, r| m.max(r.estimate.mean.abs()));
    }
    evidence.push(Evidence { check: "weight flatness".into(), pass: flat_ok, detail: format!("max |residual| {flat_max:.3e}") });
    let (chord_ok, worst) = tilted_chord_test(reduced, policy, &dms, plan.seed)?;
    evidence.push(Evidence {
        check: "tilted-cost chord convexity".into(),
        pass: chord_ok,
        detail: format!("worst relative chord gap {worst:.3e} over {CHORD_POINTS} points"),
    });
    let (fin_ok, detail) = finiteness_pairings(reduced, policy, &dms, plan)?;
    evidence.push(Evidence { check: "finite variational pairings".into(), pass: fin_ok, detail });
    let verdict = if evidence.iter().all(|e| e.pass) { CertificateVerdict::Certified } else { CertificateVerdict::Inconclusive };
    Ok(Certificate { verdict, evidence })
}


#[cfg(test)]
mod tests {
    use super::*;
    use crate::model_core::{ActionSpace, CostFunction, Dist, InformationStructure, MeasurementMap, PrimitiveSpace, Signal, TeamProblem};

    // Cost (u1 − w1)² + (u2 − u1)² with y1 = w1, y2 = w2 independent.
    // Optimum u1 = y1/2, u2 = 0 with J* = 1/2.
    fn tracking() -> TeamProblem {
        let mut prims = PrimitiveSpace::new();
        let w1 = prims.push("w1", Dist::std_normal());
        let w2 = prims.push("w2", Dist::std_normal());
        TeamProblem {
            name: "tracking".into(),
            primitives: prims,
            measurements: vec![MeasurementMap::identity(0, w1, 1), MeasurementMap::identity(1, w2, 1)],
            info: InformationStructure { sets: vec![vec![Signal::Y(0)], vec![Signal::Y(1)]] },
            cost: CostFunction::new("tracking", |w, u| (u[0][0] - w[0][0]).powi(2) + (u[1][0] - u[0][0]).powi(2)),
            action_spaces: vec![ActionSpace::free(1), ActionSpace::free(1)],
        }
    }

    fn affine(g1: f64, g2: f64) -> Policy {
        Policy::new(vec![Policy::affine_row(&[g1], 0.0), Policy::affine_row(&[g2], 0.0)])
    }

    fn plan() -> MonteCarloPlan {
        MonteCarloPlan::quadrature(8)
    }

    #[test]
    fn fit_quadratic_recovers_exact_coefficients() {
        let ts = [-2.0, -1.0, 0.0, 1.0, 2.0];
        let js: Vec<f64> = ts.iter().map(|t| 3.0 - 2.0 * t + 0.75 * t * t).collect();
        let (a, b, c) = fit_quadratic(&ts, &js);
        assert!((a - 3.0).abs() < 1e-12 && (b + 2.0).abs() < 1e-12 && (c - 0.75).abs() < 1e-12);
    }

    #[test]
    fn optimum_cost_and_curvature() {
        let p = tracking();
        let j = evaluate_cost(&p, &affine(0.5, 0.0), &plan()).unwrap();
        assert!((j.mean - 0.5).abs() < 1e-12);
        let c = frozen_curvature(&p, &affine(0.5, 0.0), 0, 0, &plan()).unwrap();
        assert!((c - 2.0).abs() < 1e-9, "{c}");
    }

    #[test]
    fn best_response_from_zero_matches_closed_form() {
        let r = best_response(&tracking(), &affine(0.0, 0.0), 0, &BestResponseClass::Affine, &plan()).unwrap();
        assert!(!r.unbounded_below);
        assert!((r.j_old.mean - 1.0).abs() < 1e-12);
        assert!((r.j_new.mean - 0.5).abs() < 1e-6, "{}", r.j_new.mean);
        match &r.policy.entries[0] {
            PolicyRep::Affine { gain, bias } => {
                assert!((gain[0][0] - 0.5).abs() < 1e-5 && bias[0].abs() < 1e-5);
            }
            other => panic!("unexpected rep {other:?}"),
        }
    }

    #[test]
    fn pbp_and_stationarity_separate_optimum_from_perturbation() {
        let p = tracking();
        let fam = TestDirectionFamily { linear: true, quadratic: false };
        assert!(pbp_check(&p, &affine(0.5, 0.0), &plan(), &BestResponseClass::Affine).unwrap().pass);
        assert!(stationarity_check(&p, &affine(0.5, 0.0), &plan(), &fam, None).unwrap().pass);
        let off = pbp_check(&p, &affine(0.2, 0.0), &plan(), &BestResponseClass::Affine).unwrap();
        assert!(!off.pass && off.failing == vec![0]);
        let st = stationarity_check(&p, &affine(0.2, 0.0), &plan(), &fam, None).unwrap();
        assert!(!st.pass && !st.dm_pass[0] && st.dm_pass[1]);
    }

    #[test]
    fn convex_problem_has_no_chord_violation() {
        let r = convexity_in_policies_check(&tracking(), &affine(0.5, 0.0), &affine(-1.0, 2.0), &alpha_grid(), &plan()).unwrap();
        assert!(!r.violation);
        assert!(r.max_gap.mean <= 1e-12);
    }

    #[test]
    fn iterated_best_responses_reach_the_optimum() {
        let p = tracking();
        let g = iterate_best_responses(&p, &affine(-1.0, 1.0), &plan(), 10).unwrap();
        let j = evaluate_cost(&p, &g, &plan()).unwrap();
        assert!((j.mean - 0.5).abs() < 1e-6, "{}", j.mean);
    }

    #[test]
    fn tolerances() {
        assert_eq!(stationarity_tol(&MonteCarloPlan::exact()), 1e-9);
        assert_eq!(stationarity_tol(&MonteCarloPlan::monte_carlo(10, 1)), 1e-3);
        assert!((pbp_tol(-4.0) - 5e-3).abs() < 1e-15);
    }
}
