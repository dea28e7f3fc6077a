//! Policy-independent static reduction by change of measure.
//!
//! Each DM's measurement is redrawn from a fixed reference law Q^i and the
//! path is reweighted by the density factors f^i, so that
//! `E_P[c] = E_Q[c · ∏ f^i]` for every policy.

use std::fmt;
use std::sync::Arc;

use crate::error::{config, Result, TeamError};
use crate::model_core::{
    gather, signal_value, ActionSpace, ActionStep, Dist, Outcome, Override, PathModel, Policy, Signal,
    TeamProblem,
};
use crate::montecarlo::{integrate, Estimate, MonteCarloPlan};
use crate::optimality::{Residual, TestDirectionFamily};
use crate::rng::{child, stream_id};

/// Log-weight above which a path aborts.
pub const LOG_WEIGHT_CAP: f64 = 700.0;

pub type LogFactorFn = Arc<dyn Fn(&[f64], &[&[f64]]) -> f64 + Send + Sync>;
pub type RecoverFn = Arc<dyn Fn(&[f64], &[&[f64]]) -> Vec<f64> + Send + Sync>;

/// How the reduced form produces y^i.
#[derive(Clone)]
pub enum RefKind {
    /// The measurement reads primitives only; it is computed as in the
    /// dynamic problem and contributes a factor of 1.
    Identity,
    /// y^i is drawn from Q^i; the channel noise primitive is recovered from
    /// `(y^i, reads)` and the factor is `f^i(y^i, reads)`.
    Channel { noise: usize, reads: Vec<Signal>, log_f: LogFactorFn, recover: RecoverFn },
}

/// Q^i together with the density factor f^i.
#[derive(Clone)]
pub struct ReferenceMeasure {
    pub dm: usize,
    pub label: String,
    pub q: Dist,
    pub kind: RefKind,
}

impl fmt::Debug for ReferenceMeasure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let kind = match &self.kind {
            RefKind::Identity => "identity".to_string(),
            RefKind::Channel { noise, reads, .. } => format!("channel(noise={noise}, reads={reads:?})"),
        };
        f.debug_struct("ReferenceMeasure")
            .field("dm", &self.dm)
            .field("label", &self.label)
            .field("q", &self.q)
            .field("kind", &kind)
            .finish()
    }
}

impl ReferenceMeasure {
    pub fn identity(dm: usize, q: Dist) -> Self {
        ReferenceMeasure { dm, label: "identity".into(), q, kind: RefKind::Identity }
    }

    /// Additive channel `y = m(reads) + ω` with Q^i equal to the noise law,
    /// so `f = p_ω(y − m) / p_ω(y)`.
    pub fn additive(
        dm: usize,
        noise: usize,
        noise_law: Dist,
        reads: Vec<Signal>,
        mean: impl Fn(&[&[f64]]) -> Vec<f64> + Send + Sync + 'static,
    ) -> Self {
        Self::additive_with_q(dm, noise, noise_law.clone(), noise_law, reads, mean)
    }

    /// Additive channel with an explicit Q^i: `f = p_ω(y − m) / q(y)`.
    /// A Q^i wider than the noise law keeps the weight variance finite.
    pub fn additive_with_q(
        dm: usize,
        noise: usize,
        noise_law: Dist,
        q: Dist,
        reads: Vec<Signal>,
        mean: impl Fn(&[&[f64]]) -> Vec<f64> + Send + Sync + 'static,
    ) -> Self {
        let mean = Arc::new(mean);
        let q_law = q.clone();
        let m1 = Arc::clone(&mean);
        let log_f: LogFactorFn = Arc::new(move |y, r| {
            let m = m1(r);
            let shifted: Vec<f64> = y.iter().zip(&m).map(|(a, b)| a - b).collect();
            let num = noise_law.log_density(&shifted).unwrap_or(f64::NAN);
            let den = q_law.log_density(y).unwrap_or(f64::NAN);
            num - den
        });
        let recover: RecoverFn = Arc::new(move |y, r| {
            let m = mean(r);
            y.iter().zip(&m).map(|(a, b)| a - b).collect()
        });
        ReferenceMeasure {
            dm,
            label: "additive".into(),
            q,
            kind: RefKind::Channel { noise, reads, log_f, recover },
        }
    }

    /// Cyclic channel `y = (ω + s(reads)) mod k` on {0, …, k−1} with a
    /// uniform Q^i, so `f = k · p_ω((y − s) mod k)`.
    pub fn modular(
        dm: usize,
        noise: usize,
        noise_probs: Vec<f64>,
        reads: Vec<Signal>,
        shift: impl Fn(&[&[f64]]) -> f64 + Send + Sync + 'static,
    ) -> Self {
        let k = noise_probs.len();
        let shift = Arc::new(shift);
        let s1 = Arc::clone(&shift);
        let wrap = move |v: f64| -> usize { (v.round() as i64).rem_euclid(k as i64) as usize };
        let probs = noise_probs.clone();
        let log_f: LogFactorFn = Arc::new(move |y, r| (k as f64 * probs[wrap(y[0] - s1(r))]).ln());
        let recover: RecoverFn = Arc::new(move |y, r| vec![wrap(y[0] - shift(r)) as f64]);
        let atoms: Vec<f64> = (0..k).map(|v| v as f64).collect();
        let q = Dist::finite_scalar(&atoms, &vec![1.0 / k as f64; k]);
        ReferenceMeasure {
            dm,
            label: "modular".into(),
            q,
            kind: RefKind::Channel { noise, reads, log_f, recover },
        }
    }

    /// ∫ f^i dQ^i for fixed conditioning reads.
    pub fn normalization(&self, reads: &[Vec<f64>], plan: &MonteCarloPlan) -> Result<Estimate> {
        match &self.kind {
            RefKind::Identity => Ok(Estimate::exact(1.0)),
            RefKind::Channel { log_f, .. } => {
                let r: Vec<&[f64]> = reads.iter().map(Vec::as_slice).collect();
                let est = integrate(
                    std::slice::from_ref(&self.q),
                    plan,
                    child(stream_id("normalization"), self.dm as u64),
                    1,
                    |p, _| Ok(vec![log_f(&p[0], &r).exp()]),
                )?;
                Ok(est[0])
            }
        }
    }
}

/// Where each integration coordinate of the reduced form goes.
#[derive(Clone, Copy, Debug, PartialEq)]
enum Slot {
    Prim(usize),
    Measurement(usize),
}

/// A team problem together with its reference measures.
#[derive(Clone, Debug)]
pub struct ReducedProblem {
    pub base: TeamProblem,
    pub refs: Vec<ReferenceMeasure>,
    slots: Vec<Slot>,
    noise_of: Vec<Option<usize>>,
}

impl ReducedProblem {
    pub fn new(base: TeamProblem, refs: Vec<ReferenceMeasure>) -> Result<Self> {
        let n = base.n();
        if refs.len() != n || refs.iter().enumerate().any(|(i, r)| r.dm != i) {
            return config("reduced problem needs one reference measure per DM, in DM order");
        }
        let mut noise_of = vec![None; base.primitives.vars.len()];
        for r in &refs {
            if let RefKind::Channel { noise, reads, .. } = &r.kind {
                if *noise >= noise_of.len() {
                    return config(format!("reference of DM {} names an unknown noise primitive", r.dm + 1));
                }
                if noise_of[*noise].is_some() {
                    return config("a noise primitive may feed only one channel");
                }
                if !base.measurements[r.dm].reads.contains(&Signal::Prim(*noise)) {
                    return config(format!("DM {} measurement does not read its declared noise", r.dm + 1));
                }
                if reads.iter().any(|s| matches!(s, Signal::Y(k) | Signal::U(k) if *k >= r.dm)) {
                    return config(format!("reference of DM {} reads a non-preceding signal", r.dm + 1));
                }
                if r.q.dim() != base.measurements[r.dm].dim {
                    return config(format!("Q of DM {} has the wrong dimension", r.dm + 1));
                }
                noise_of[*noise] = Some(r.dm);
            }
        }
        for r in &refs {
            let reads: Vec<Signal> = match &r.kind {
                RefKind::Identity => {
                    let m = &base.measurements[r.dm];
                    if m.reads.iter().any(|s| !matches!(s, Signal::Prim(_))) {
                        return config(format!(
                            "DM {} measurement depends on other signals; an identity reference is invalid",
                            r.dm + 1
                        ));
                    }
                    m.reads.clone()
                }
                RefKind::Channel { reads, .. } => reads.clone(),
            };
            if reads.iter().any(|s| matches!(s, Signal::Prim(p) if noise_of[*p].is_some())) {
                return config(format!("DM {} reads the noise of another channel", r.dm + 1));
            }
        }
        let mut slots: Vec<Slot> =
            (0..noise_of.len()).filter(|p| noise_of[*p].is_none()).map(Slot::Prim).collect();
        for r in &refs {
            if matches!(r.kind, RefKind::Channel { .. }) {
                slots.push(Slot::Measurement(r.dm));
            }
        }
        Ok(ReducedProblem { base, refs, slots, noise_of })
    }

    pub fn n(&self) -> usize {
        self.base.n()
    }

    /// Primitive indices recovered from measurements rather than sampled.
    pub fn noise_primitives(&self) -> Vec<usize> {
        (0..self.noise_of.len()).filter(|p| self.noise_of[*p].is_some()).collect()
    }

    fn run_inner(
        &self,
        policy: &Policy,
        point: &[Vec<f64>],
        ov: Override<'_>,
        project: bool,
    ) -> Result<Outcome> {
        let n = self.n();
        if policy.len() != n {
            return config("policy length does not match the number of DMs");
        }
        let mut prims: Vec<Vec<f64>> = vec![Vec::new(); self.noise_of.len()];
        let mut qy: Vec<Option<&Vec<f64>>> = vec![None; n];
        for (slot, v) in self.slots.iter().zip(point) {
            match *slot {
                Slot::Prim(p) => prims[p] = v.clone(),
                Slot::Measurement(dm) => qy[dm] = Some(v),
            }
        }
        let mut ys: Vec<Vec<f64>> = Vec::with_capacity(n);
        let mut us: Vec<Vec<f64>> = Vec::with_capacity(n);
        let mut infos = Vec::with_capacity(n);
        let (mut us_a, mut us_b) = (Vec::new(), Vec::new());
        let step = ActionStep { policy, ov, project };
        let mut log_w = 0.0;
        for i in 0..n {
            let y = match &self.refs[i].kind {
                RefKind::Identity => {
                    let m = &self.base.measurements[i];
                    let reads: Vec<&[f64]> =
                        m.reads.iter().map(|s| signal_value(*s, &prims, &ys, &us)).collect();
                    (m.eval)(&reads)
                }
                RefKind::Channel { noise, reads, log_f, recover } => {
                    let y = qy[i].cloned().unwrap_or_default();
                    let r: Vec<&[f64]> = reads.iter().map(|s| signal_value(*s, &prims, &ys, &us)).collect();
                    let lf = log_f(&y, &r);
                    if lf.is_nan() || lf == f64::NEG_INFINITY {
                        return Err(TeamError::Invariant { dm: i, what: "nonpositive density factor".into() });
                    }
                    let omega = recover(&y, &r);
                    prims[*noise] = omega;
                    log_w += lf;
                    if log_w > LOG_WEIGHT_CAP {
                        return Err(TeamError::WeightOverflow { dm: i, log_weight: log_w });
                    }
                    y
                }
            };
            ys.push(y);
            let (info, u) =
                step.act(i, &self.base.info.sets[i], &self.base.action_spaces[i], &prims, &ys, &us, &mut us_a, &mut us_b)?;
            infos.push(info);
            us.push(u);
        }
        let weight = log_w.exp();
        let cost = (self.base.cost.eval)(&prims, &us);
        Ok(Outcome { prims, ys, us, infos, cost, weight, value: cost * weight })
    }

    /// ∏ f^i along a path given the sampled primitives, measurements and actions.
    pub fn weight(&self, prims: &[Vec<f64>], ys: &[Vec<f64>], us: &[Vec<f64>]) -> Result<f64> {
        let mut log_w = 0.0;
        for r in &self.refs {
            if let RefKind::Channel { reads, log_f, .. } = &r.kind {
                let vals: Vec<&[f64]> = reads.iter().map(|s| signal_value(*s, prims, ys, us)).collect();
                let lf = log_f(&ys[r.dm], &vals);
                if lf.is_nan() || lf == f64::NEG_INFINITY {
                    return Err(TeamError::Invariant { dm: r.dm, what: "nonpositive density factor".into() });
                }
                log_w += lf;
            }
        }
        if log_w > LOG_WEIGHT_CAP {
            return Err(TeamError::WeightOverflow { dm: self.n().saturating_sub(1), log_weight: log_w });
        }
        Ok(log_w.exp())
    }

    /// Tilted cost c̃ at a fixed action profile for one reduced sample point.
    pub fn tilted_cost_at(&self, point: &[Vec<f64>], actions: &[Vec<f64>]) -> Result<f64> {
        let fixed: Vec<Option<Vec<f64>>> = actions.iter().cloned().map(Some).collect();
        let dummy = Policy::new(
            (0..self.n()).map(|i| Policy::constant(self.info_dim(i), vec![0.0; self.action_dim(i)])).collect(),
        );
        Ok(self.run_inner(&dummy, point, Override::Set(&fixed), false)?.value)
    }

    pub fn action_spaces(&self) -> &[ActionSpace] {
        &self.base.action_spaces
    }
}

impl PathModel for ReducedProblem {
    fn label(&self) -> String {
        format!("{} (reduced)", self.base.name)
    }

    fn n_dms(&self) -> usize {
        self.n()
    }

    fn sampling_dists(&self) -> Vec<Dist> {
        self.slots
            .iter()
            .map(|s| match *s {
                Slot::Prim(p) => self.base.primitives.vars[p].dist.clone(),
                Slot::Measurement(dm) => self.refs[dm].q.clone(),
            })
            .collect()
    }

    fn info_set(&self, dm: usize) -> &[Signal] {
        &self.base.info.sets[dm]
    }

    fn signal_dim(&self, s: Signal) -> usize {
        self.base.signal_dim_of(s)
    }

    fn action_space(&self, dm: usize) -> &ActionSpace {
        &self.base.action_spaces[dm]
    }

    fn run(&self, policy: &Policy, point: &[Vec<f64>], ov: Override<'_>, project: bool) -> Result<Outcome> {
        self.run_inner(policy, point, ov, project)
    }
}

/// `E_Q[c · dP/dQ]` under the policy.
pub fn evaluate_cost_reduced(reduced: &ReducedProblem, policy: &Policy, plan: &MonteCarloPlan) -> Result<Estimate> {
    crate::optimality::evaluate_cost(reduced, policy, plan)
}

/// Paired estimate of `J_dynamic − J_reduced` with both arms on one seed.
pub fn cost_gap(reduced: &ReducedProblem, policy: &Policy, plan: &MonteCarloPlan) -> Result<(Estimate, Estimate, Estimate)> {
    let d = crate::optimality::evaluate_cost(&reduced.base, policy, plan)?;
    let r = crate::optimality::evaluate_cost(reduced, policy, plan)?;
    let se = (d.std_error.powi(2) + r.std_error.powi(2)).sqrt();
    Ok((d, r, Estimate { mean: d.mean - r.mean, std_error: se, n: d.n.min(r.n) }))
}

/// Empirical mean of the weight under Q (should be 1).
pub fn weight_mean(reduced: &ReducedProblem, policy: &Policy, plan: &MonteCarloPlan) -> Result<Estimate> {
    let est = integrate(&reduced.sampling_dists(), plan, stream_id("weight-mean"), 1, |p, _| {
        Ok(vec![reduced.run(policy, p, Override::None, false)?.weight])
    })?;
    Ok(est[0])
}

/// Flatness check of `∇_{u^i} E_Q[dP/dQ | I^i]` in weak form.
#[derive(Clone, Debug)]
pub struct FlatnessReport {
    pub residuals: Vec<Residual>,
    pub tol: f64,
    pub pass: bool,
}

/// Weak-form residuals of the weight gradient for DM `dm`, paired with each
/// test function of its information.
pub fn weight_flatness_residual(
    reduced: &ReducedProblem,
    policy: &Policy,
    dm: usize,
    tests: &TestDirectionFamily,
    plan: &MonteCarloPlan,
) -> Result<FlatnessReport> {
    let du = reduced.action_dim(dm);
    let d_info = reduced.info_dim(dm);
    let labels = tests.labels(d_info);
    let k = labels.len();
    let h = plan.fd_step;
    let space = reduced.action_space(dm).clone();
    let est = integrate(&reduced.sampling_dists(), plan, child(stream_id("flatness"), dm as u64), du * k, |p, _| {
        let base = reduced.run(policy, p, Override::None, false)?;
        let phi = tests.eval(&base.infos[dm]);
        let mut row = Vec::with_capacity(du * k);
        for a in 0..du {
            let u = base.us[dm][a];
            let (lo, hi) = (space.lo[a], space.hi[a]);
            let mut up = vec![0.0; du];
            let mut dn = vec![0.0; du];
            let (sp, sm) = (if u + h <= hi { h } else { 0.0 }, if u - h >= lo { h } else { 0.0 });
            up[a] = sp;
            dn[a] = -sm;
            let wp = reduced.run(policy, p, Override::Shift { dm, delta: &up }, false)?.weight;
            let wm = reduced.run(policy, p, Override::Shift { dm, delta: &dn }, false)?.weight;
            let g = if sp + sm > 0.0 { (wp - wm) / (sp + sm) } else { 0.0 };
            row.extend(phi.iter().map(|f| g * f));
        }
        Ok(row)
    })?;
    let tol = crate::optimality::stationarity_tol(plan);
    let mut residuals = Vec::with_capacity(est.len());
    for a in 0..du {
        for (j, l) in labels.iter().enumerate() {
            residuals.push(Residual { dm, coord: a, direction: l.clone(), estimate: est[a * k + j] });
        }
    }
    let pass = residuals.iter().all(|r| r.estimate.mean.abs() <= tol + 3.0 * r.estimate.std_error);
    Ok(FlatnessReport { residuals, tol, pass })
}

/// Conditional expectations of the cost given DM `dm`'s information, computed
/// directly under P and through the Bayes formula under Q, per atom.
pub fn bayes_consistency(reduced: &ReducedProblem, policy: &Policy, dm: usize) -> Result<Vec<(Vec<f64>, f64, f64)>> {
    let p_nodes = crate::montecarlo::grid(&reduced.base.sampling_dists(), crate::montecarlo::Sampling::Exact)?;
    let q_nodes = crate::montecarlo::grid(&reduced.sampling_dists(), crate::montecarlo::Sampling::Exact)?;
    let mut atoms: Vec<Vec<f64>> = Vec::new();
    let mut direct: Vec<(f64, f64)> = Vec::new();
    let mut via_q: Vec<(f64, f64)> = Vec::new();
    let find = |atoms: &mut Vec<Vec<f64>>, direct: &mut Vec<(f64, f64)>, via_q: &mut Vec<(f64, f64)>, key: &[f64]| {
        match atoms.iter().position(|a| crate::model_core::same_point(a, key)) {
            Some(i) => i,
            None => {
                atoms.push(key.to_vec());
                direct.push((0.0, 0.0));
                via_q.push((0.0, 0.0));
                atoms.len() - 1
            }
        }
    };
    for (pt, w) in &p_nodes {
        let o = reduced.base.run(policy, pt, Override::None, false)?;
        let i = find(&mut atoms, &mut direct, &mut via_q, &o.infos[dm]);
        direct[i].0 += w * o.cost;
        direct[i].1 += w;
    }
    for (pt, w) in &q_nodes {
        let o = reduced.run(policy, pt, Override::None, false)?;
        let i = find(&mut atoms, &mut direct, &mut via_q, &o.infos[dm]);
        via_q[i].0 += w * o.cost * o.weight;
        via_q[i].1 += w * o.weight;
    }
    Ok(atoms
        .into_iter()
        .zip(direct.into_iter().zip(via_q))
        .filter(|(_, ((_, pd), (_, pq)))| *pd > 0.0 && *pq > 0.0)
        .map(|(a, ((nd, pd), (nq, pq)))| (a, nd / pd, nq / pq))
        .collect())
}

/// Information vector of `dm` along a reduced path (for diagnostics).
pub fn info_of(reduced: &ReducedProblem, o: &Outcome, dm: usize) -> Vec<f64> {
    gather(&reduced.base.info.sets[dm], &o.prims, &o.ys, &o.us)
}
