//! Policy-dependent static reduction for partially nested teams and the
//! control-sharing variants.
//!
//! Each DM's measurement splits as `ŷ^D_i = g_i(h_i(ζ), u^{↓i})` with `g_i`
//! invertible in its first argument. Four forms share one cost:
//!
//! | form | measurement of DM i | extra information |
//! |------|---------------------|-------------------|
//! | D    | `g_i(h_i(ζ), u^{↓i})` | none |
//! | S    | `h_i(ζ)`            | none |
//! | D-CS | `g_i(h_i(ζ), u^{↓i})` | `u^{K_i}` |
//! | CS   | `h_i(ζ)`            | `u^{K_i}` |
//!
//! Policies move between forms through [`transport_policy`], which rebuilds
//! whatever the source policy needs from what the target DM observes.

use std::collections::BTreeSet;
use std::fmt;
use std::sync::Arc;

use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::error::{config, Result, TeamError};
use crate::model_core::{
    classify_information_structure, InformationStructure, IsClass, MeasureFn, MeasurementMap, Policy, PolicyRep,
    Signal, TeamProblem,
};
use crate::montecarlo::MonteCarloPlan;
use crate::rng::{stream_id, substream, Rng};

pub type MixFn = Arc<dyn Fn(&[f64], &[&[f64]]) -> Vec<f64> + Send + Sync>;

/// `ŷ^D_i = g_i(h_i(ζ), u^{↓i})` for one DM.
#[derive(Clone)]
pub struct ObservationDecomposition {
    pub dm: usize,
    pub label: String,
    /// Primitive indices read by `h`.
    pub h_reads: Vec<usize>,
    pub dim: usize,
    pub h: MeasureFn,
    /// ↓i in increasing order; `g` receives the actions in this order.
    pub down: Vec<usize>,
    pub g: MixFn,
    pub g_inv: MixFn,
    pub affine_in_u: bool,
}

impl fmt::Debug for ObservationDecomposition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ObservationDecomposition")
            .field("dm", &self.dm)
            .field("label", &self.label)
            .field("h_reads", &self.h_reads)
            .field("down", &self.down)
            .field("affine_in_u", &self.affine_in_u)
            .finish()
    }
}

impl ObservationDecomposition {
    /// No action enters the measurement.
    pub fn unmixed(
        dm: usize,
        h_reads: Vec<usize>,
        dim: usize,
        h: impl Fn(&[&[f64]]) -> Vec<f64> + Send + Sync + 'static,
    ) -> Self {
        ObservationDecomposition {
            dm,
            label: "unmixed".into(),
            h_reads,
            dim,
            h: Arc::new(h),
            down: Vec::new(),
            g: Arc::new(|h, _| h.to_vec()),
            g_inv: Arc::new(|y, _| y.to_vec()),
            affine_in_u: true,
        }
    }

    /// `g(h, u) = h + Σ_j B_j u^j`, one matrix per upstream DM in `terms`.
    pub fn additive(
        dm: usize,
        h_reads: Vec<usize>,
        dim: usize,
        h: impl Fn(&[&[f64]]) -> Vec<f64> + Send + Sync + 'static,
        terms: Vec<(usize, Vec<Vec<f64>>)>,
    ) -> Self {
        let mut terms = terms;
        terms.sort_by_key(|t| t.0);
        let down = terms.iter().map(|t| t.0).collect();
        let mats: Arc<Vec<Vec<Vec<f64>>>> = Arc::new(terms.into_iter().map(|t| t.1).collect());
        let shift = move |m: &Vec<Vec<Vec<f64>>>, us: &[&[f64]], d: usize| -> Vec<f64> {
            let mut s = vec![0.0; d];
            for (b, u) in m.iter().zip(us) {
                for (r, row) in b.iter().enumerate() {
                    s[r] += row.iter().zip(u.iter()).map(|(x, y)| x * y).sum::<f64>();
                }
            }
            s
        };
        let (m1, m2) = (Arc::clone(&mats), Arc::clone(&mats));
        ObservationDecomposition {
            dm,
            label: "additive".into(),
            h_reads,
            dim,
            h: Arc::new(h),
            down,
            g: Arc::new(move |h, us| h.iter().zip(shift(&m1, us, h.len())).map(|(a, b)| a + b).collect()),
            g_inv: Arc::new(move |y, us| y.iter().zip(shift(&m2, us, y.len())).map(|(a, b)| a - b).collect()),
            affine_in_u: true,
        }
    }

    /// Scalar `g(h, u) = h + √u` for a single nonnegative upstream action.
    pub fn sqrt_mix(dm: usize, prim: usize, upstream: usize) -> Self {
        ObservationDecomposition {
            dm,
            label: "sqrt-mix".into(),
            h_reads: vec![prim],
            dim: 1,
            h: Arc::new(|r| r[0].to_vec()),
            down: vec![upstream],
            g: Arc::new(|h, us| vec![h[0] + us[0][0].max(0.0).sqrt()]),
            g_inv: Arc::new(|y, us| vec![y[0] - us[0][0].max(0.0).sqrt()]),
            affine_in_u: false,
        }
    }

    fn eval_h(&self, prims: &[Vec<f64>]) -> Vec<f64> {
        let reads: Vec<&[f64]> = self.h_reads.iter().map(|p| prims[*p].as_slice()).collect();
        (self.h)(&reads)
    }
}

/// Decompositions of every DM's measurement.
#[derive(Clone, Debug)]
pub struct InvertibleObservation {
    pub parts: Vec<ObservationDecomposition>,
}

impl InvertibleObservation {
    pub fn new(parts: Vec<ObservationDecomposition>) -> Self {
        InvertibleObservation { parts }
    }

    /// Every failed check: ordering, ↓i agreement, consistency with the base
    /// measurements and the round trip `g⁻¹(g(h, u), u) = h`.
    pub fn validate(&self, base: &TeamProblem, samples: usize, seed: u64) -> Vec<String> {
        let mut out = Vec::new();
        let n = base.n();
        if self.parts.len() != n {
            out.push(format!("{} decompositions for {} DMs", self.parts.len(), n));
            return out;
        }
        let down = base.precedence();
        for (i, p) in self.parts.iter().enumerate() {
            if p.dm != i {
                out.push(format!("decomposition {} declares DM {}", i + 1, p.dm + 1));
            }
            let want: Vec<usize> = down[i].iter().copied().collect();
            if p.down != want {
                out.push(format!("DM {}: declared precedence {:?} differs from computed {:?}", i + 1, plus1(&p.down), plus1(&want)));
            }
            if p.dim != base.measurements[i].dim {
                out.push(format!("DM {}: decomposition dimension {} differs from the measurement", i + 1, p.dim));
            }
            if p.h_reads.iter().any(|r| *r >= base.primitives.vars.len()) {
                out.push(format!("DM {}: h reads an unknown primitive", i + 1));
            }
        }
        if !out.is_empty() {
            return out;
        }
        let mut rng = substream(seed, stream_id("decomposition"), 0);
        let mut worst_trip: f64 = 0.0;
        let mut worst_meas: f64 = 0.0;
        for _ in 0..samples {
            let prims = base.primitives.draw(&mut rng).values;
            let us: Vec<Vec<f64>> = base.action_spaces.iter().map(|a| random_action(a, &mut rng)).collect();
            let mut ys: Vec<Vec<f64>> = Vec::with_capacity(n);
            for (i, p) in self.parts.iter().enumerate() {
                let h = p.eval_h(&prims);
                let ud: Vec<&[f64]> = p.down.iter().map(|j| us[*j].as_slice()).collect();
                let y = (p.g)(&h, &ud);
                let back = (p.g_inv)(&y, &ud);
                worst_trip = worst_trip.max(sup_diff(&back, &h));
                let m = &base.measurements[i];
                let reads: Vec<&[f64]> = m
                    .reads
                    .iter()
                    .map(|s| match *s {
                        Signal::Prim(k) => prims[k].as_slice(),
                        Signal::Y(k) => ys[k].as_slice(),
                        Signal::U(k) => us[k].as_slice(),
                    })
                    .collect();
                worst_meas = worst_meas.max(sup_diff(&(m.eval)(&reads), &y));
                ys.push(y);
            }
        }
        if !(worst_trip <= 1e-9) {
            out.push(format!("round trip g⁻¹(g(h, u), u) = h fails by {worst_trip:.3e}"));
        }
        if !(worst_meas <= 1e-9) {
            out.push(format!("g(h(ζ), u) differs from the measurement by {worst_meas:.3e}"));
        }
        out
    }
}

fn plus1(v: &[usize]) -> Vec<usize> {
    v.iter().map(|x| x + 1).collect()
}

fn sup_diff(a: &[f64], b: &[f64]) -> f64 {
    if a.len() != b.len() {
        return f64::INFINITY;
    }
    a.iter().zip(b).fold(0.0, |m, (x, y)| m.max((x - y).abs()))
}

fn random_action(a: &crate::model_core::ActionSpace, rng: &mut Rng) -> Vec<f64> {
    a.lo.iter()
        .zip(&a.hi)
        .map(|(lo, hi)| {
            let z: f64 = rng.sample(StandardNormal);
            match (lo.is_finite(), hi.is_finite()) {
                (true, true) => lo + (hi - lo) * rng.random::<f64>(),
                (true, false) => lo + z.abs(),
                (false, true) => hi - z.abs(),
                (false, false) => z,
            }
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum Form {
    D,
    S,
    #[serde(rename = "D-CS")]
    DCs,
    #[serde(rename = "CS")]
    Cs,
}

impl Form {
    pub fn parse(s: &str) -> Result<Form> {
        match s.to_ascii_lowercase().as_str() {
            "d" => Ok(Form::D),
            "s" => Ok(Form::S),
            "dcs" | "d-cs" => Ok(Form::DCs),
            "cs" => Ok(Form::Cs),
            other => config(format!("unknown form '{other}' (expected d, s, dcs or cs)")),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Form::D => "D",
            Form::S => "S",
            Form::DCs => "D-CS",
            Form::Cs => "CS",
        }
    }

    pub fn static_measurements(self) -> bool {
        matches!(self, Form::S | Form::Cs)
    }

    pub fn shares_actions(self) -> bool {
        matches!(self, Form::DCs | Form::Cs)
    }
}

impl fmt::Display for Form {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// A form together with the sharing pattern K_i of the control-sharing forms.
#[derive(Clone, Debug, PartialEq)]
pub struct FormTag {
    pub form: Form,
    /// `None` shares all of ↓i.
    pub sharing: Option<Vec<Vec<usize>>>,
}

impl FormTag {
    pub fn new(form: Form) -> Self {
        FormTag { form, sharing: None }
    }

    pub fn with_sharing(form: Form, sharing: Vec<Vec<usize>>) -> Self {
        FormTag { form, sharing: Some(sharing) }
    }
}

impl From<Form> for FormTag {
    fn from(form: Form) -> Self {
        FormTag::new(form)
    }
}

/// Information sets of the requested form.
pub fn form_info_sets(base: &TeamProblem, tag: &FormTag) -> Result<Vec<Vec<Signal>>> {
    let down = base.precedence();
    let n = base.n();
    if tag.form == Form::D {
        return Ok(base.info.sets.clone());
    }
    let mut sets: Vec<Vec<Signal>> =
        base.info.sets.iter().map(|s| s.iter().copied().filter(|x| matches!(x, Signal::Y(_))).collect()).collect();
    if tag.form.shares_actions() {
        for i in 0..n {
            let k: BTreeSet<usize> = match &tag.sharing {
                Some(sh) => {
                    let ki: BTreeSet<usize> = sh.get(i).cloned().unwrap_or_default().into_iter().collect();
                    if let Some(bad) = ki.iter().find(|j| !down[i].contains(j)) {
                        return config(format!("sharing pattern K{} contains u{} outside the precedence set", i + 1, bad + 1));
                    }
                    ki
                }
                None => down[i].clone(),
            };
            for j in k {
                if !sets[i].contains(&Signal::U(j)) {
                    sets[i].push(Signal::U(j));
                }
            }
        }
    }
    Ok(sets)
}

fn require_nested(base: &TeamProblem) -> Result<()> {
    let (class, _) = classify_information_structure(base);
    if class == IsClass::Nonclassical {
        return Err(TeamError::UnsupportedForm(format!(
            "'{}' has a nonclassical information structure; policy-dependent reductions need partial nesting",
            base.name
        )));
    }
    Ok(())
}

/// The team problem in the requested form; the cost is shared by all forms.
pub fn make_form(base: &TeamProblem, inv: &InvertibleObservation, tag: &FormTag) -> Result<TeamProblem> {
    require_nested(base)?;
    let errs = inv.validate(base, 256, 0);
    if !errs.is_empty() {
        return config(format!("invalid observation decomposition: {}", errs.join("; ")));
    }
    let sets = form_info_sets(base, tag)?;
    let measurements = if tag.form.static_measurements() {
        inv.parts
            .iter()
            .map(|p| {
                let h = Arc::clone(&p.h);
                MeasurementMap {
                    dm: p.dm,
                    reads: p.h_reads.iter().map(|k| Signal::Prim(*k)).collect(),
                    dim: p.dim,
                    label: format!("h{}", p.dm + 1),
                    eval: h,
                }
            })
            .collect()
    } else {
        base.measurements.clone()
    };
    Ok(TeamProblem {
        name: format!("{}[{}]", base.name, tag.form),
        primitives: base.primitives.clone(),
        measurements,
        info: InformationStructure { sets },
        cost: base.cost.clone(),
        action_spaces: base.action_spaces.clone(),
    })
}

struct TransportCtx {
    parts: Vec<ObservationDecomposition>,
    src: Policy,
    src_sets: Vec<Vec<Signal>>,
    src_static: bool,
    tgt_sets: Vec<Vec<Signal>>,
    y_dims: Vec<usize>,
    u_dims: Vec<usize>,
}

/// What one DM knows in the target form, grown by reconstruction.
struct Knowledge {
    st: Vec<Option<Vec<f64>>>,
    dy: Vec<Option<Vec<f64>>>,
    us: Vec<Option<Vec<f64>>>,
    busy: Vec<bool>,
}

impl TransportCtx {
    fn knowledge(&self, i: usize, info: &[f64], tgt_static: bool) -> Result<Knowledge> {
        let n = self.parts.len();
        let mut k = Knowledge { st: vec![None; n], dy: vec![None; n], us: vec![None; n], busy: vec![false; n] };
        let mut at = 0;
        for s in &self.tgt_sets[i] {
            let d = match *s {
                Signal::Y(j) => self.y_dims[j],
                Signal::U(j) => self.u_dims[j],
                Signal::Prim(_) => return config("transported policies cannot observe primitives"),
            };
            if at + d > info.len() {
                return config(format!("DM {} received {} information components", i + 1, info.len()));
            }
            let v = info[at..at + d].to_vec();
            at += d;
            match *s {
                Signal::Y(j) if tgt_static => k.st[j] = Some(v),
                Signal::Y(j) => k.dy[j] = Some(v),
                Signal::U(j) => k.us[j] = Some(v),
                Signal::Prim(_) => {}
            }
        }
        if at != info.len() {
            return config(format!("DM {} received {} information components, expected {}", i + 1, info.len(), at));
        }
        Ok(k)
    }

    fn upstream(&self, k: &mut Knowledge, idx: usize) -> Result<Vec<Vec<f64>>> {
        self.parts[idx].down.iter().map(|j| self.action(k, *j)).collect()
    }

    fn stat(&self, k: &mut Knowledge, idx: usize) -> Result<Vec<f64>> {
        if let Some(v) = &k.st[idx] {
            return Ok(v.clone());
        }
        let Some(y) = k.dy[idx].clone() else {
            return config(format!("y{} is not recoverable from the target information", idx + 1));
        };
        let ups = self.upstream(k, idx)?;
        let refs: Vec<&[f64]> = ups.iter().map(Vec::as_slice).collect();
        let v = (self.parts[idx].g_inv)(&y, &refs);
        k.st[idx] = Some(v.clone());
        Ok(v)
    }

    fn dynamic(&self, k: &mut Knowledge, idx: usize) -> Result<Vec<f64>> {
        if let Some(v) = &k.dy[idx] {
            return Ok(v.clone());
        }
        let Some(h) = k.st[idx].clone() else {
            return config(format!("y{} is not recoverable from the target information", idx + 1));
        };
        let ups = self.upstream(k, idx)?;
        let refs: Vec<&[f64]> = ups.iter().map(Vec::as_slice).collect();
        let v = (self.parts[idx].g)(&h, &refs);
        k.dy[idx] = Some(v.clone());
        Ok(v)
    }

    fn action(&self, k: &mut Knowledge, j: usize) -> Result<Vec<f64>> {
        if let Some(u) = &k.us[j] {
            return Ok(u.clone());
        }
        if k.busy[j] {
            return Err(TeamError::Cycle(j));
        }
        k.busy[j] = true;
        let mut info = Vec::new();
        for s in &self.src_sets[j] {
            let v = match *s {
                Signal::Y(m) if self.src_static => self.stat(k, m)?,
                Signal::Y(m) => self.dynamic(k, m)?,
                Signal::U(m) => self.action(k, m)?,
                Signal::Prim(_) => return config("source policies cannot observe primitives"),
            };
            info.extend(v);
        }
        let u = self.src.entries[j].eval(&info)?;
        k.busy[j] = false;
        k.us[j] = Some(u.clone());
        Ok(u)
    }
}

/// Policy of the `to` form inducing the same actions as `policy` in the
/// `from` form on every path.
pub fn transport_policy(
    base: &TeamProblem,
    inv: &InvertibleObservation,
    from: &FormTag,
    to: &FormTag,
    policy: &Policy,
) -> Result<Policy> {
    require_nested(base)?;
    let n = base.n();
    if policy.len() != n || inv.parts.len() != n {
        return config("policy, decomposition and problem disagree on the number of DMs");
    }
    let ctx = Arc::new(TransportCtx {
        parts: inv.parts.clone(),
        src: policy.clone(),
        src_sets: form_info_sets(base, from)?,
        src_static: from.form.static_measurements(),
        tgt_sets: form_info_sets(base, to)?,
        y_dims: inv.parts.iter().map(|p| p.dim).collect(),
        u_dims: base.action_spaces.iter().map(|a| a.dim()).collect(),
    });
    let tgt_static = to.form.static_measurements();
    let entries = (0..n)
        .map(|i| {
            let c = Arc::clone(&ctx);
            let label = format!("{}→{} transport of DM {}", from.form, to.form, i + 1);
            Policy::closure(label, base.action_spaces[i].dim(), move |info| {
                let mut k = c.knowledge(i, info, tgt_static)?;
                c.action(&mut k, i)
            })
        })
        .collect();
    Ok(Policy::new(entries))
}

pub fn transport_policy_d_to_s(base: &TeamProblem, inv: &InvertibleObservation, policy: &Policy) -> Result<Policy> {
    transport_policy(base, inv, &Form::D.into(), &Form::S.into(), policy)
}

pub fn transport_policy_s_to_d(base: &TeamProblem, inv: &InvertibleObservation, policy: &Policy) -> Result<Policy> {
    transport_policy(base, inv, &Form::S.into(), &Form::D.into(), policy)
}

/// Affine representation of a closure, when probing shows one exists.
pub fn try_affinize(rep: &PolicyRep, info_dim: usize, seed: u64) -> Option<PolicyRep> {
    if rep.is_affine() {
        return Some(rep.clone());
    }
    let b = rep.eval(&vec![0.0; info_dim]).ok()?;
    let mut gain = vec![vec![0.0; info_dim]; b.len()];
    for c in 0..info_dim {
        let mut e = vec![0.0; info_dim];
        e[c] = 1.0;
        let v = rep.eval(&e).ok()?;
        for (r, row) in gain.iter_mut().enumerate() {
            row[c] = v[r] - b[r];
        }
    }
    let cand = PolicyRep::Affine { gain, bias: b };
    let mut rng = substream(seed, stream_id("affinize"), 0);
    for _ in 0..4 {
        let x: Vec<f64> = (0..info_dim).map(|_| 3.0 * rng.sample::<f64, _>(StandardNormal)).collect();
        let got = rep.eval(&x).ok()?;
        let want = cand.eval(&x).ok()?;
        let scale = 1.0 + got.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        if sup_diff(&got, &want) > 1e-9 * scale {
            return None;
        }
    }
    Some(cand)
}

/// Replace every closure entry that probes as affine by its affine form.
pub fn affinize_policy(problem: &TeamProblem, policy: &Policy) -> Policy {
    let entries = policy
        .entries
        .iter()
        .enumerate()
        .map(|(i, e)| try_affinize(e, problem.info_dim_of(i), i as u64).unwrap_or_else(|| e.clone()))
        .collect();
    Policy::new(entries)
}

#[derive(Clone, Debug, Serialize)]
pub struct ConditionCReport {
    /// Largest |second difference| per DM (0 for DMs with empty ↓i).
    pub per_dm: Vec<f64>,
    pub max_second_difference: f64,
    pub pass: bool,
}

/// Affinity of `u^{↓i} ↦ γ^D_i(y^D_i)` through the observation maps, tested
/// by second differences at sampled (ζ, u, a, b).
pub fn check_condition_c(
    base: &TeamProblem,
    inv: &InvertibleObservation,
    policy: &Policy,
    plan: &MonteCarloPlan,
) -> Result<ConditionCReport> {
    let n = base.n();
    let samples = if plan.is_deterministic() { 2000 } else { plan.samples.min(2000) };
    let mut rng = substream(plan.seed, stream_id("condition-c"), 0);
    let mut per_dm = vec![0.0f64; n];
    let mut pass = true;
    for i in 0..n {
        let down = &inv.parts[i].down;
        if down.is_empty() {
            continue;
        }
        for _ in 0..samples {
            let prims = base.primitives.draw(&mut rng).values;
            let base_u: Vec<Vec<f64>> = base.action_spaces.iter().map(|a| random_action(a, &mut rng)).collect();
            let step = |rng: &mut Rng| -> Vec<Vec<f64>> {
                base.action_spaces
                    .iter()
                    .map(|a| {
                        a.lo.iter()
                            .map(|lo| {
                                let z: f64 = 0.5 * rng.sample::<f64, _>(StandardNormal);
                                if lo.is_finite() {
                                    z.abs()
                                } else {
                                    z
                                }
                            })
                            .collect()
                    })
                    .collect()
            };
            let a = step(&mut rng);
            let b = step(&mut rng);
            let f = |sa: f64, sb: f64| -> Result<Vec<f64>> {
                let us: Vec<Vec<f64>> = base_u
                    .iter()
                    .zip(a.iter().zip(&b))
                    .map(|(u, (x, y))| u.iter().zip(x.iter().zip(y)).map(|(u, (x, y))| u + sa * x + sb * y).collect())
                    .collect();
                let mut info = Vec::new();
                for s in &base.info.sets[i] {
                    match *s {
                        Signal::Y(k) => {
                            let p = &inv.parts[k];
                            let ud: Vec<&[f64]> = p.down.iter().map(|j| us[*j].as_slice()).collect();
                            info.extend((p.g)(&p.eval_h(&prims), &ud));
                        }
                        Signal::U(k) => info.extend_from_slice(&us[k]),
                        Signal::Prim(k) => info.extend_from_slice(&prims[k]),
                    }
                }
                policy.entries[i].eval(&info)
            };
            let (f00, f10, f01, f11) = (f(0.0, 0.0)?, f(1.0, 0.0)?, f(0.0, 1.0)?, f(1.0, 1.0)?);
            let scale = 1.0 + [&f00, &f10, &f01, &f11].iter().flat_map(|v| v.iter()).fold(0.0f64, |m, x| m.max(x.abs()));
            let d = (0..f00.len()).fold(0.0f64, |m, r| m.max((f11[r] - f10[r] - f01[r] + f00[r]).abs()));
            per_dm[i] = per_dm[i].max(d);
            if d > 1e-7 * scale {
                pass = false;
            }
        }
    }
    let max_second_difference = per_dm.iter().fold(0.0f64, |m, v| m.max(*v));
    Ok(ConditionCReport { per_dm, max_second_difference, pass })
}

/// Largest action difference between two policies over sampled paths of
/// their respective forms.
pub fn pathwise_action_gap(
    form_a: &TeamProblem,
    policy_a: &Policy,
    form_b: &TeamProblem,
    policy_b: &Policy,
    samples: usize,
    seed: u64,
) -> Result<(f64, f64)> {
    let mut rng = substream(seed, stream_id("pathwise-gap"), 0);
    let mut action_gap: f64 = 0.0;
    let mut cost_gap: f64 = 0.0;
    for _ in 0..samples {
        let prims = form_a.primitives.draw(&mut rng).values;
        let a = form_a.run_path(policy_a, &prims, crate::model_core::Override::None, false)?;
        let b = form_b.run_path(policy_b, &prims, crate::model_core::Override::None, false)?;
        for (x, y) in a.us.iter().zip(&b.us) {
            action_gap = action_gap.max(sup_diff(x, y));
        }
        cost_gap = cost_gap.max((a.cost - b.cost).abs());
    }
    Ok((action_gap, cost_gap))
}
