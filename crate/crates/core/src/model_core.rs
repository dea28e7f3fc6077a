//! Witsenhausen's intrinsic model: primitives, measurement maps, information
//! structures, deterministic policies, costs and forward simulation.
//!
//! DMs are indexed from 0 in code. Signal names in configs and reports use the
//! 1-based convention (`y1` is the measurement of DM index 0).

use std::collections::BTreeSet;
use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng as _;
use rand_distr::StandardNormal;

use crate::error::{config, Result, TeamError};
use crate::rng::Rng;

/// Distribution descriptor for a primitive variable or a reference measure.
#[derive(Clone, Debug)]
pub enum Dist {
    Gaussian(Gaussian),
    Uniform { lo: Vec<f64>, hi: Vec<f64> },
    Finite { atoms: Vec<Vec<f64>>, probs: Vec<f64> },
}

/// Multivariate normal with a precomputed square-root factor.
#[derive(Clone, Debug)]
pub struct Gaussian {
    pub mean: Vec<f64>,
    pub cov: Vec<Vec<f64>>,
    factor: DMatrix<f64>,
    precision: Option<DMatrix<f64>>,
    log_norm: f64,
    min_eig: f64,
}

impl Gaussian {
    pub fn new(mean: Vec<f64>, cov: Vec<Vec<f64>>) -> Self {
        let d = mean.len();
        let m = DMatrix::from_fn(d, d, |r, c| {
            cov.get(r).and_then(|row| row.get(c)).copied().unwrap_or(f64::NAN)
        });
        let sym = (&m + m.transpose()) * 0.5;
        let (factor, min_eig) = if sym.iter().all(|x| x.is_finite()) && d > 0 {
            let eig = SymmetricEigen::new(sym.clone());
            let min_eig = eig.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min);
            let sq = DMatrix::from_diagonal(&eig.eigenvalues.map(|l| l.max(0.0).sqrt()));
            (&eig.eigenvectors * sq, min_eig)
        } else {
            (DMatrix::zeros(d, d), if d == 0 { 0.0 } else { f64::NAN })
        };
        let (precision, log_norm) = match sym.clone().cholesky() {
            Some(ch) if min_eig > 0.0 => {
                let log_det: f64 = ch.l().diagonal().iter().map(|x| 2.0 * x.ln()).sum();
                let ln2pi = (2.0 * std::f64::consts::PI).ln();
                (Some(ch.inverse()), -0.5 * (d as f64 * ln2pi + log_det))
            }
            _ => (None, f64::NAN),
        };
        Gaussian { mean, cov, factor, precision, log_norm, min_eig }
    }

    pub fn standard(dim: usize) -> Self {
        let cov = (0..dim)
            .map(|r| (0..dim).map(|c| if r == c { 1.0 } else { 0.0 }).collect())
            .collect();
        Gaussian::new(vec![0.0; dim], cov)
    }

    /// `mean + F z` for a standard normal coordinate vector `z`.
    pub fn transform(&self, z: &[f64]) -> Vec<f64> {
        let zv = DVector::from_column_slice(z);
        let x = &self.factor * zv;
        self.mean.iter().zip(x.iter()).map(|(m, v)| m + v).collect()
    }

    pub fn log_density(&self, x: &[f64]) -> Option<f64> {
        let p = self.precision.as_ref()?;
        let d = DVector::from_iterator(x.len(), x.iter().zip(&self.mean).map(|(a, m)| a - m));
        Some(self.log_norm - 0.5 * (d.transpose() * p * &d)[(0, 0)])
    }
}

impl Dist {
    pub fn gaussian(mean: Vec<f64>, cov: Vec<Vec<f64>>) -> Self {
        Dist::Gaussian(Gaussian::new(mean, cov))
    }

    pub fn std_normal() -> Self {
        Dist::Gaussian(Gaussian::standard(1))
    }

    pub fn normal(mean: f64, var: f64) -> Self {
        Dist::gaussian(vec![mean], vec![vec![var]])
    }

    pub fn uniform(lo: Vec<f64>, hi: Vec<f64>) -> Self {
        Dist::Uniform { lo, hi }
    }

    pub fn finite(atoms: Vec<Vec<f64>>, probs: Vec<f64>) -> Self {
        Dist::Finite { atoms, probs }
    }

    /// Scalar finite law on the given values.
    pub fn finite_scalar(values: &[f64], probs: &[f64]) -> Self {
        Dist::Finite { atoms: values.iter().map(|v| vec![*v]).collect(), probs: probs.to_vec() }
    }

    pub fn dim(&self) -> usize {
        match self {
            Dist::Gaussian(g) => g.mean.len(),
            Dist::Uniform { lo, .. } => lo.len(),
            Dist::Finite { atoms, .. } => atoms.first().map_or(0, Vec::len),
        }
    }

    pub fn is_finite_support(&self) -> bool {
        matches!(self, Dist::Finite { .. })
    }

    pub fn sample(&self, rng: &mut Rng) -> Vec<f64> {
        match self {
            Dist::Gaussian(g) => {
                let z: Vec<f64> = (0..g.mean.len()).map(|_| rng.sample(StandardNormal)).collect();
                g.transform(&z)
            }
            Dist::Uniform { lo, hi } => {
                lo.iter().zip(hi).map(|(l, h)| l + (h - l) * rng.random::<f64>()).collect()
            }
            Dist::Finite { atoms, probs } => {
                let r: f64 = rng.random();
                let mut acc = 0.0;
                for (a, p) in atoms.iter().zip(probs) {
                    acc += p;
                    if r < acc {
                        return a.clone();
                    }
                }
                atoms.last().cloned().unwrap_or_default()
            }
        }
    }

    /// Log density (Lebesgue for continuous laws, counting for finite laws).
    pub fn log_density(&self, x: &[f64]) -> Option<f64> {
        match self {
            Dist::Gaussian(g) => g.log_density(x),
            Dist::Uniform { lo, hi } => {
                let mut acc = 0.0;
                for ((v, l), h) in x.iter().zip(lo).zip(hi) {
                    if v < l || v > h {
                        return Some(f64::NEG_INFINITY);
                    }
                    acc -= (h - l).ln();
                }
                Some(acc)
            }
            Dist::Finite { atoms, probs } => {
                let p = atoms
                    .iter()
                    .zip(probs)
                    .filter(|(a, _)| same_point(a, x))
                    .map(|(_, p)| *p)
                    .sum::<f64>();
                Some(p.ln())
            }
        }
    }

    pub fn mean(&self) -> Vec<f64> {
        match self {
            Dist::Gaussian(g) => g.mean.clone(),
            Dist::Uniform { lo, hi } => lo.iter().zip(hi).map(|(l, h)| 0.5 * (l + h)).collect(),
            Dist::Finite { atoms, probs } => {
                let d = self.dim();
                let mut m = vec![0.0; d];
                for (a, p) in atoms.iter().zip(probs) {
                    for (mi, ai) in m.iter_mut().zip(a) {
                        *mi += p * ai;
                    }
                }
                m
            }
        }
    }

    /// Human-readable invariant violations (empty when valid).
    pub fn violations(&self) -> Vec<String> {
        let mut out = Vec::new();
        match self {
            Dist::Gaussian(g) => {
                let d = g.mean.len();
                if g.cov.len() != d || g.cov.iter().any(|r| r.len() != d) {
                    out.push("covariance shape mismatch".to_string());
                    return out;
                }
                for r in 0..d {
                    for c in 0..d {
                        let (a, b) = (g.cov[r][c], g.cov[c][r]);
                        if (a - b).abs() > 1e-12 * (1.0 + a.abs().max(b.abs())) {
                            out.push("covariance not symmetric".to_string());
                            return out;
                        }
                    }
                }
                let scale = g.cov.iter().flatten().fold(0.0f64, |m, v| m.max(v.abs()));
                if !(g.min_eig >= -1e-12 * (1.0 + scale)) {
                    out.push("covariance not PSD".to_string());
                }
            }
            Dist::Uniform { lo, hi } => {
                if lo.len() != hi.len() || lo.iter().zip(hi).any(|(l, h)| !(l < h)) {
                    out.push("uniform box must satisfy lo < hi".to_string());
                }
            }
            Dist::Finite { atoms, probs } => {
                if atoms.len() != probs.len() || atoms.is_empty() {
                    out.push("finite support needs one probability per atom".to_string());
                }
                if probs.iter().any(|p| !(*p >= 0.0)) {
                    out.push("finite support probabilities must be nonnegative".to_string());
                }
                let s: f64 = probs.iter().sum();
                if (s - 1.0).abs() > 1e-12 {
                    out.push(format!("finite support probabilities sum to {s}, not 1"));
                }
                let d = self.dim();
                if atoms.iter().any(|a| a.len() != d) {
                    out.push("finite support atoms have mixed dimensions".to_string());
                }
            }
        }
        out
    }
}

pub(crate) fn same_point(a: &[f64], b: &[f64]) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= 1e-9 * (1.0 + x.abs()))
}

#[derive(Clone, Debug)]
pub struct PrimitiveVar {
    pub name: String,
    pub dist: Dist,
}

/// Ordered primitive random variables (ω₀, ω₁, …).
#[derive(Clone, Debug, Default)]
pub struct PrimitiveSpace {
    pub vars: Vec<PrimitiveVar>,
}

impl PrimitiveSpace {
    pub fn new() -> Self {
        Self::default()
    }

    /// Append a variable and return its index.
    pub fn push(&mut self, name: impl Into<String>, dist: Dist) -> usize {
        self.vars.push(PrimitiveVar { name: name.into(), dist });
        self.vars.len() - 1
    }

    pub fn index(&self, name: &str) -> Option<usize> {
        self.vars.iter().position(|v| v.name == name)
    }

    pub fn dists(&self) -> Vec<Dist> {
        self.vars.iter().map(|v| v.dist.clone()).collect()
    }

    pub fn all_finite(&self) -> bool {
        self.vars.iter().all(|v| v.dist.is_finite_support())
    }

    pub fn draw(&self, rng: &mut Rng) -> PrimitiveSample {
        PrimitiveSample { values: self.vars.iter().map(|v| v.dist.sample(rng)).collect() }
    }
}

/// One realization ω of all primitives, aligned with [`PrimitiveSpace::vars`].
#[derive(Clone, Debug, PartialEq)]
pub struct PrimitiveSample {
    pub values: Vec<Vec<f64>>,
}

impl PrimitiveSample {
    pub fn get<'a>(&'a self, space: &PrimitiveSpace, name: &str) -> Option<&'a [f64]> {
        space.index(name).map(|i| self.values[i].as_slice())
    }
}

/// A named signal: a primitive, the measurement of a DM, or the action of a DM.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Signal {
    Prim(usize),
    Y(usize),
    U(usize),
}

impl Signal {
    pub fn parse(s: &str, space: &PrimitiveSpace) -> Result<Signal> {
        let idx = |rest: &str| -> Option<usize> {
            rest.parse::<usize>().ok().filter(|k| *k >= 1).map(|k| k - 1)
        };
        if let Some(i) = space.index(s) {
            return Ok(Signal::Prim(i));
        }
        if let Some(k) = s.strip_prefix('y').and_then(idx) {
            return Ok(Signal::Y(k));
        }
        if let Some(k) = s.strip_prefix('u').and_then(idx) {
            return Ok(Signal::U(k));
        }
        config(format!("unknown signal '{s}'"))
    }

    pub fn name(&self, space: &PrimitiveSpace) -> String {
        match self {
            Signal::Prim(i) => space.vars.get(*i).map_or(format!("prim{i}"), |v| v.name.clone()),
            Signal::Y(k) => format!("y{}", k + 1),
            Signal::U(k) => format!("u{}", k + 1),
        }
    }
}

pub type MeasureFn = Arc<dyn Fn(&[&[f64]]) -> Vec<f64> + Send + Sync>;

/// h^i: the measurement of one DM as a function of its declared reads only.
#[derive(Clone)]
pub struct MeasurementMap {
    pub dm: usize,
    pub reads: Vec<Signal>,
    pub dim: usize,
    pub label: String,
    pub eval: MeasureFn,
}

impl MeasurementMap {
    pub fn new(
        dm: usize,
        reads: Vec<Signal>,
        dim: usize,
        label: impl Into<String>,
        eval: impl Fn(&[&[f64]]) -> Vec<f64> + Send + Sync + 'static,
    ) -> Self {
        MeasurementMap { dm, reads, dim, label: label.into(), eval: Arc::new(eval) }
    }

    /// y = primitive, read verbatim.
    pub fn identity(dm: usize, prim: usize, dim: usize) -> Self {
        MeasurementMap::new(dm, vec![Signal::Prim(prim)], dim, "identity", |r| r[0].to_vec())
    }
}

impl fmt::Debug for MeasurementMap {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("MeasurementMap")
            .field("dm", &self.dm)
            .field("reads", &self.reads)
            .field("dim", &self.dim)
            .field("label", &self.label)
            .finish()
    }
}

/// Per-DM observed signal sets I^i.
#[derive(Clone, Debug, PartialEq)]
pub struct InformationStructure {
    pub sets: Vec<Vec<Signal>>,
}

/// Information-structure label, strongest first.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum IsClass {
    Static,
    Classical,
    PartiallyNested,
    Nonclassical,
}

impl fmt::Display for IsClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            IsClass::Static => "static",
            IsClass::Classical => "classical",
            IsClass::PartiallyNested => "partially-nested",
            IsClass::Nonclassical => "nonclassical",
        })
    }
}

/// Box action space; infinite bounds allowed.
#[derive(Clone, Debug, PartialEq)]
pub struct ActionSpace {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

impl ActionSpace {
    pub fn free(dim: usize) -> Self {
        ActionSpace { lo: vec![f64::NEG_INFINITY; dim], hi: vec![f64::INFINITY; dim] }
    }

    pub fn nonnegative(dim: usize) -> Self {
        ActionSpace { lo: vec![0.0; dim], hi: vec![f64::INFINITY; dim] }
    }

    pub fn boxed(lo: Vec<f64>, hi: Vec<f64>) -> Self {
        ActionSpace { lo, hi }
    }

    pub fn dim(&self) -> usize {
        self.lo.len()
    }

    pub fn contains(&self, u: &[f64]) -> bool {
        u.len() == self.dim()
            && u.iter().zip(&self.lo).zip(&self.hi).all(|((x, l), h)| *x >= *l && *x <= *h)
    }

    pub fn project(&self, u: &mut [f64]) {
        for ((x, l), h) in u.iter_mut().zip(&self.lo).zip(&self.hi) {
            *x = x.clamp(*l, *h);
        }
    }

    pub fn is_unbounded(&self) -> bool {
        self.lo.iter().all(|l| l.is_infinite()) && self.hi.iter().all(|h| h.is_infinite())
    }
}

pub type PolicyFn = Arc<dyn Fn(&[f64]) -> Result<Vec<f64>> + Send + Sync>;

/// Representation of one DM's decision rule γ^i.
#[derive(Clone)]
pub enum PolicyRep {
    /// `u = gain · info + bias`; gain columns follow the order of I^i.
    Affine { gain: Vec<Vec<f64>>, bias: Vec<f64> },
    Closure { label: String, dim: usize, f: PolicyFn },
    Tabular { keys: Vec<Vec<f64>>, actions: Vec<Vec<f64>> },
}

impl PolicyRep {
    pub fn action_dim(&self) -> usize {
        match self {
            PolicyRep::Affine { bias, .. } => bias.len(),
            PolicyRep::Closure { dim, .. } => *dim,
            PolicyRep::Tabular { actions, .. } => actions.first().map_or(0, Vec::len),
        }
    }

    pub fn eval(&self, info: &[f64]) -> Result<Vec<f64>> {
        match self {
            PolicyRep::Affine { gain, bias } => {
                let mut u = bias.clone();
                for (ui, row) in u.iter_mut().zip(gain) {
                    if row.len() != info.len() {
                        return config(format!(
                            "affine gain has {} columns but the information vector has {}",
                            row.len(),
                            info.len()
                        ));
                    }
                    *ui += row.iter().zip(info).map(|(g, x)| g * x).sum::<f64>();
                }
                Ok(u)
            }
            PolicyRep::Closure { f, .. } => f(info),
            PolicyRep::Tabular { keys, actions } => keys
                .iter()
                .position(|k| same_point(k, info))
                .map(|i| actions[i].clone())
                .ok_or_else(|| TeamError::Config(format!("tabular policy undefined at {info:?}"))),
        }
    }

    pub fn is_affine(&self) -> bool {
        matches!(self, PolicyRep::Affine { .. })
    }
}

impl fmt::Debug for PolicyRep {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PolicyRep::Affine { gain, bias } => {
                f.debug_struct("Affine").field("gain", gain).field("bias", bias).finish()
            }
            PolicyRep::Closure { label, dim, .. } => {
                f.debug_struct("Closure").field("label", label).field("dim", dim).finish()
            }
            PolicyRep::Tabular { keys, actions } => {
                f.debug_struct("Tabular").field("keys", keys).field("actions", actions).finish()
            }
        }
    }
}

/// A deterministic policy profile (γ¹, …, γ^N).
#[derive(Clone, Debug)]
pub struct Policy {
    pub entries: Vec<PolicyRep>,
}

impl Policy {
    pub fn new(entries: Vec<PolicyRep>) -> Self {
        Policy { entries }
    }

    pub fn affine(gain: Vec<Vec<f64>>, bias: Vec<f64>) -> PolicyRep {
        PolicyRep::Affine { gain, bias }
    }

    /// Scalar affine rule `u = Σ g_k info_k + b`.
    pub fn affine_row(gain: &[f64], bias: f64) -> PolicyRep {
        PolicyRep::Affine { gain: vec![gain.to_vec()], bias: vec![bias] }
    }

    pub fn constant(info_dim: usize, value: Vec<f64>) -> PolicyRep {
        PolicyRep::Affine { gain: vec![vec![0.0; info_dim]; value.len()], bias: value }
    }

    pub fn closure(
        label: impl Into<String>,
        dim: usize,
        f: impl Fn(&[f64]) -> Result<Vec<f64>> + Send + Sync + 'static,
    ) -> PolicyRep {
        PolicyRep::Closure { label: label.into(), dim, f: Arc::new(f) }
    }

    pub fn with_entry(&self, dm: usize, rep: PolicyRep) -> Policy {
        let mut p = self.clone();
        p.entries[dm] = rep;
        p
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

pub type CostFn = Arc<dyn Fn(&[Vec<f64>], &[Vec<f64>]) -> f64 + Send + Sync>;
pub type CostGradFn = Arc<dyn Fn(&[Vec<f64>], &[Vec<f64>], usize) -> Vec<f64> + Send + Sync>;

/// c(ω, u¹, …, u^N) with optional analytic action gradients.
#[derive(Clone)]
pub struct CostFunction {
    pub label: String,
    pub eval: CostFn,
    pub grad: Option<CostGradFn>,
    pub smooth: bool,
    pub convex_in_actions: bool,
}

impl CostFunction {
    pub fn new(
        label: impl Into<String>,
        eval: impl Fn(&[Vec<f64>], &[Vec<f64>]) -> f64 + Send + Sync + 'static,
    ) -> Self {
        CostFunction {
            label: label.into(),
            eval: Arc::new(eval),
            grad: None,
            smooth: true,
            convex_in_actions: false,
        }
    }

    pub fn with_grad(
        mut self,
        grad: impl Fn(&[Vec<f64>], &[Vec<f64>], usize) -> Vec<f64> + Send + Sync + 'static,
    ) -> Self {
        self.grad = Some(Arc::new(grad));
        self
    }

    pub fn convex(mut self, convex: bool) -> Self {
        self.convex_in_actions = convex;
        self
    }

    pub fn constant(k: f64) -> Self {
        CostFunction::new(format!("constant {k}"), move |_, _| k)
            .with_grad(|_, u, dm| vec![0.0; u[dm].len()])
            .convex(true)
    }
}

impl fmt::Debug for CostFunction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("CostFunction")
            .field("label", &self.label)
            .field("grad", &self.grad.is_some())
            .field("smooth", &self.smooth)
            .field("convex_in_actions", &self.convex_in_actions)
            .finish()
    }
}

/// An instance of the intrinsic model.
#[derive(Clone, Debug)]
pub struct TeamProblem {
    pub name: String,
    pub primitives: PrimitiveSpace,
    pub measurements: Vec<MeasurementMap>,
    pub info: InformationStructure,
    pub cost: CostFunction,
    pub action_spaces: Vec<ActionSpace>,
}

/// Realized measurements, actions and cost of one forward simulation.
#[derive(Clone, Debug, PartialEq)]
pub struct Path {
    pub ys: Vec<Vec<f64>>,
    pub us: Vec<Vec<f64>>,
    pub cost: f64,
}

/// Deviation applied while running a path.
#[derive(Clone, Copy)]
pub enum Override<'a> {
    None,
    /// `u^dm = γ^dm(I^dm) + delta`; downstream DMs respond.
    Shift { dm: usize, delta: &'a [f64] },
    /// Fix the listed actions regardless of the policy.
    Set(&'a [Option<Vec<f64>>]),
    /// Action-level mixture `α γ + (1 − α) γ'`; shared-action signals carry
    /// each component's own upstream actions.
    Mixture { other: &'a Policy, alpha: f64 },
}

/// Outcome of one path in any problem form.
#[derive(Clone, Debug)]
pub struct Outcome {
    /// Primitive values used by the cost (recovered where the form requires it).
    pub prims: Vec<Vec<f64>>,
    pub ys: Vec<Vec<f64>>,
    pub us: Vec<Vec<f64>>,
    pub infos: Vec<Vec<f64>>,
    pub cost: f64,
    pub weight: f64,
    /// The integrand of the form: `cost` for dynamic forms, `cost · weight` for tilted ones.
    pub value: f64,
}

/// Anything that can be sampled and simulated under a policy.
pub trait PathModel: Send + Sync {
    fn label(&self) -> String;
    fn n_dms(&self) -> usize;
    /// Laws of the integration coordinates, in the order `run` expects.
    fn sampling_dists(&self) -> Vec<Dist>;
    fn info_set(&self, dm: usize) -> &[Signal];
    fn signal_dim(&self, s: Signal) -> usize;
    fn action_space(&self, dm: usize) -> &ActionSpace;
    fn run(&self, policy: &Policy, point: &[Vec<f64>], ov: Override<'_>, project: bool) -> Result<Outcome>;

    /// Analytic ∂value/∂u^dm when it equals the full pathwise derivative.
    fn pathwise_gradient(&self, _outcome: &Outcome, _dm: usize) -> Option<Vec<f64>> {
        None
    }

    fn info_dim(&self, dm: usize) -> usize {
        self.info_set(dm).iter().map(|s| self.signal_dim(*s)).sum()
    }

    fn action_dim(&self, dm: usize) -> usize {
        self.action_space(dm).dim()
    }

    fn exact_capable(&self) -> bool {
        self.sampling_dists().iter().all(Dist::is_finite_support)
    }
}

pub(crate) fn signal_value<'a>(
    s: Signal,
    prims: &'a [Vec<f64>],
    ys: &'a [Vec<f64>],
    us: &'a [Vec<f64>],
) -> &'a [f64] {
    match s {
        Signal::Prim(i) => &prims[i],
        Signal::Y(k) => &ys[k],
        Signal::U(k) => &us[k],
    }
}

pub(crate) fn gather(signals: &[Signal], prims: &[Vec<f64>], ys: &[Vec<f64>], us: &[Vec<f64>]) -> Vec<f64> {
    let mut out = Vec::new();
    for s in signals {
        out.extend_from_slice(signal_value(*s, prims, ys, us));
    }
    out
}

/// Shared action selection for every form's forward pass.
pub(crate) struct ActionStep<'a> {
    pub policy: &'a Policy,
    pub ov: Override<'a>,
    pub project: bool,
}

impl ActionStep<'_> {
    /// Compute u^i given the realized signals; `us_a`/`us_b` hold mixture components.
    #[allow(clippy::too_many_arguments)]
    pub fn act(
        &self,
        i: usize,
        set: &[Signal],
        space: &ActionSpace,
        prims: &[Vec<f64>],
        ys: &[Vec<f64>],
        us: &[Vec<f64>],
        us_a: &mut Vec<Vec<f64>>,
        us_b: &mut Vec<Vec<f64>>,
    ) -> Result<(Vec<f64>, Vec<f64>)> {
        let info = gather(set, prims, ys, us);
        let mut u = match self.ov {
            Override::Mixture { other, alpha } => {
                let ia = gather(set, prims, ys, us_a);
                let ib = gather(set, prims, ys, us_b);
                let ua = self.policy.entries[i].eval(&ia)?;
                let ub = other.entries[i].eval(&ib)?;
                let mix = ua.iter().zip(&ub).map(|(a, b)| alpha * a + (1.0 - alpha) * b).collect();
                us_a.push(ua);
                us_b.push(ub);
                mix
            }
            Override::Set(fixed) => match fixed.get(i).and_then(|v| v.as_ref()) {
                Some(v) => v.clone(),
                None => self.policy.entries[i].eval(&info)?,
            },
            Override::Shift { dm, delta } if dm == i => {
                let mut u = self.policy.entries[i].eval(&info)?;
                for (x, d) in u.iter_mut().zip(delta) {
                    *x += d;
                }
                u
            }
            _ => self.policy.entries[i].eval(&info)?,
        };
        if u.len() != space.dim() {
            return config(format!(
                "policy of DM {} returns {} components, action space has {}",
                i + 1,
                u.len(),
                space.dim()
            ));
        }
        if self.project {
            space.project(&mut u);
        } else if !space.contains(&u) {
            return Err(TeamError::Domain { dm: i, value: u });
        }
        Ok((info, u))
    }
}

impl TeamProblem {
    pub fn n(&self) -> usize {
        self.measurements.len()
    }

    pub fn signal_dim_of(&self, s: Signal) -> usize {
        match s {
            Signal::Prim(i) => self.primitives.vars.get(i).map_or(0, |v| v.dist.dim()),
            Signal::Y(k) => self.measurements.get(k).map_or(0, |m| m.dim),
            Signal::U(k) => self.action_spaces.get(k).map_or(0, ActionSpace::dim),
        }
    }

    pub fn info_dim_of(&self, dm: usize) -> usize {
        self.info.sets[dm].iter().map(|s| self.signal_dim_of(*s)).sum()
    }

    pub fn check_policy(&self, policy: &Policy) -> Result<()> {
        if policy.len() != self.n() {
            return config(format!("policy has {} entries, problem has {} DMs", policy.len(), self.n()));
        }
        for (i, e) in policy.entries.iter().enumerate() {
            if e.action_dim() != self.action_spaces[i].dim() {
                return config(format!("policy of DM {} has the wrong action dimension", i + 1));
            }
            if let PolicyRep::Affine { gain, .. } = e {
                let d = self.info_dim(i);
                if gain.iter().any(|row| row.len() != d) {
                    return config(format!(
                        "affine policy of DM {} expects {} information components",
                        i + 1,
                        d
                    ));
                }
            }
        }
        Ok(())
    }

    /// Forward simulation with an optional deviation.
    pub fn run_path(
        &self,
        policy: &Policy,
        prims: &[Vec<f64>],
        ov: Override<'_>,
        project: bool,
    ) -> Result<Outcome> {
        let n = self.n();
        if policy.len() != n {
            return config("policy length does not match the number of DMs");
        }
        let mut ys: Vec<Vec<f64>> = Vec::with_capacity(n);
        let mut us: Vec<Vec<f64>> = Vec::with_capacity(n);
        let mut infos = Vec::with_capacity(n);
        let (mut us_a, mut us_b) = (Vec::new(), Vec::new());
        let step = ActionStep { policy, ov, project };
        for i in 0..n {
            let m = &self.measurements[i];
            let reads: Vec<&[f64]> = m.reads.iter().map(|s| signal_value(*s, prims, &ys, &us)).collect();
            let y = (m.eval)(&reads);
            if y.len() != m.dim {
                return config(format!("measurement of DM {} has dimension {}, declared {}", i + 1, y.len(), m.dim));
            }
            ys.push(y);
            let (info, u) =
                step.act(i, &self.info.sets[i], &self.action_spaces[i], prims, &ys, &us, &mut us_a, &mut us_b)?;
            infos.push(info);
            us.push(u);
        }
        let cost = (self.cost.eval)(prims, &us);
        Ok(Outcome { prims: prims.to_vec(), ys, us, infos, cost, weight: 1.0, value: cost })
    }

    /// Precedence sets ↓i: actions that affect y^i, transitively closed.
    pub fn precedence(&self) -> Vec<BTreeSet<usize>> {
        precedence_sets(&self.measurements, &self.info)
    }

    /// Whether any DM's information or measurement responds to u^dm.
    pub fn is_static_in(&self, dm: usize) -> bool {
        let down = self.precedence();
        let shared = self.info.sets.iter().any(|s| s.contains(&Signal::U(dm)));
        !shared && down.iter().all(|d| !d.contains(&dm))
    }
}

impl PathModel for TeamProblem {
    fn label(&self) -> String {
        self.name.clone()
    }

    fn n_dms(&self) -> usize {
        self.n()
    }

    fn sampling_dists(&self) -> Vec<Dist> {
        self.primitives.dists()
    }

    fn info_set(&self, dm: usize) -> &[Signal] {
        &self.info.sets[dm]
    }

    fn signal_dim(&self, s: Signal) -> usize {
        self.signal_dim_of(s)
    }

    fn action_space(&self, dm: usize) -> &ActionSpace {
        &self.action_spaces[dm]
    }

    fn run(&self, policy: &Policy, point: &[Vec<f64>], ov: Override<'_>, project: bool) -> Result<Outcome> {
        self.run_path(policy, point, ov, project)
    }

    fn pathwise_gradient(&self, outcome: &Outcome, dm: usize) -> Option<Vec<f64>> {
        let g = self.cost.grad.as_ref()?;
        if self.is_static_in(dm) {
            Some(g(&outcome.prims, &outcome.us, dm))
        } else {
            None
        }
    }
}

/// `simulate_path`: y^i in index order, u^i = γ^i(I^i), cost c(ω, u).
pub fn simulate_path(problem: &TeamProblem, policy: &Policy, sample: &PrimitiveSample) -> Result<Path> {
    problem.check_policy(policy)?;
    if sample.values.len() != problem.primitives.vars.len()
        || sample.values.iter().zip(&problem.primitives.vars).any(|(v, p)| v.len() != p.dist.dim())
    {
        return config("primitive sample does not match the primitive space");
    }
    let o = problem.run_path(policy, &sample.values, Override::None, false)?;
    Ok(Path { ys: o.ys, us: o.us, cost: o.cost })
}

pub(crate) fn precedence_sets(measurements: &[MeasurementMap], info: &InformationStructure) -> Vec<BTreeSet<usize>> {
    let n = measurements.len();
    let mut down: Vec<BTreeSet<usize>> = vec![BTreeSet::new(); n];
    let mut acts: Vec<BTreeSet<usize>> = vec![BTreeSet::new(); n];
    let affects = |s: &Signal, down: &[BTreeSet<usize>], acts: &[BTreeSet<usize>]| -> BTreeSet<usize> {
        match *s {
            Signal::Prim(_) => BTreeSet::new(),
            Signal::Y(k) if k < down.len() => down[k].clone(),
            Signal::U(k) if k < acts.len() => {
                let mut a = acts[k].clone();
                a.insert(k);
                a
            }
            _ => BTreeSet::new(),
        }
    };
    for i in 0..n {
        let mut d = BTreeSet::new();
        for r in &measurements[i].reads {
            match r {
                Signal::Y(k) | Signal::U(k) if *k >= i => continue,
                _ => d.extend(affects(r, &down, &acts)),
            }
        }
        down[i] = d;
        let mut a = BTreeSet::new();
        if let Some(set) = info.sets.get(i) {
            for s in set {
                match s {
                    Signal::Y(k) if *k <= i => a.extend(affects(s, &down, &acts)),
                    Signal::U(k) if *k < i => a.extend(affects(s, &down, &acts)),
                    _ => {}
                }
            }
        }
        acts[i] = a;
    }
    down
}

fn subset(a: &[Signal], b: &[Signal]) -> bool {
    a.iter().all(|s| b.contains(s))
}

/// Classify the information structure and return ↓i alongside the label.
///
/// Classical requires I^k ⊆ I^i and u^k ∈ I^i for every k < i.
pub fn classify_information_structure(problem: &TeamProblem) -> (IsClass, Vec<BTreeSet<usize>>) {
    let down = problem.precedence();
    let sets = &problem.info.sets;
    let label = if down.iter().all(BTreeSet::is_empty) {
        IsClass::Static
    } else if (0..sets.len())
        .all(|i| (0..i).all(|k| subset(&sets[k], &sets[i]) && sets[i].contains(&Signal::U(k))))
    {
        IsClass::Classical
    } else if (0..sets.len()).all(|i| down[i].iter().all(|&j| subset(&sets[j], &sets[i]))) {
        IsClass::PartiallyNested
    } else {
        IsClass::Nonclassical
    };
    (label, down)
}

/// Every violated type invariant, each naming its field and rule.
pub fn validate_problem(problem: &TeamProblem) -> Vec<String> {
    let mut out = Vec::new();
    let n = problem.n();
    let mut names = BTreeSet::new();
    for v in &problem.primitives.vars {
        if !names.insert(v.name.clone()) {
            out.push(format!("primitives: duplicate name '{}'", v.name));
        }
        for msg in v.dist.violations() {
            out.push(format!("primitives: {msg}"));
        }
    }
    if problem.info.sets.len() != n {
        out.push(format!("info: {} sets for {} DMs", problem.info.sets.len(), n));
    }
    if problem.action_spaces.len() != n {
        out.push(format!("action_spaces: {} entries for {} DMs", problem.action_spaces.len(), n));
    }
    let n_prims = problem.primitives.vars.len();
    let mut seq_bad = false;
    for (i, m) in problem.measurements.iter().enumerate() {
        if m.dm != i {
            out.push(format!("measurements: entry {} declares DM {}", i + 1, m.dm + 1));
        }
        for r in &m.reads {
            match *r {
                Signal::Prim(p) if p >= n_prims => {
                    out.push(format!("measurements: DM {} reads unknown primitive", i + 1))
                }
                Signal::Y(k) | Signal::U(k) if k >= i => seq_bad = true,
                _ => {}
            }
        }
    }
    if seq_bad {
        out.push("measurements: sequentiality violated".to_string());
    }
    for (i, set) in problem.info.sets.iter().enumerate() {
        for s in set {
            match *s {
                Signal::Prim(_) => out.push(format!("info: I{} contains a primitive", i + 1)),
                Signal::Y(k) if k > i || k >= n => {
                    out.push(format!("info: I{} contains y{} from a later DM", i + 1, k + 1))
                }
                Signal::U(k) if k >= i => {
                    out.push(format!("info: I{} contains u{} from a non-preceding DM", i + 1, k + 1))
                }
                _ => {}
            }
        }
    }
    for (i, a) in problem.action_spaces.iter().enumerate() {
        if a.lo.len() != a.hi.len() || a.lo.iter().zip(&a.hi).any(|(l, h)| !(l <= h)) {
            out.push(format!("action_spaces: DM {} has an empty box", i + 1));
        }
    }
    out
}

/// Largest relative gap between the analytic cost gradient and central
/// differences with step `h` at random primitive/action points.
pub fn cost_gradient_gap(problem: &TeamProblem, points: usize, h: f64, rng: &mut Rng) -> Option<f64> {
    let grad = problem.cost.grad.as_ref()?;
    let mut worst: f64 = 0.0;
    for _ in 0..points {
        let prims = problem.primitives.draw(rng).values;
        let us: Vec<Vec<f64>> = problem
            .action_spaces
            .iter()
            .map(|a| {
                (0..a.dim())
                    .map(|k| {
                        let z: f64 = rng.sample(StandardNormal);
                        if a.lo[k].is_finite() {
                            a.lo[k] + 0.5 + z.abs()
                        } else {
                            z
                        }
                    })
                    .collect()
            })
            .collect();
        for dm in 0..problem.n() {
            let g = grad(&prims, &us, dm);
            for k in 0..us[dm].len() {
                let mut up = us.clone();
                let mut dn = us.clone();
                up[dm][k] += h;
                dn[dm][k] -= h;
                let fd = ((problem.cost.eval)(&prims, &up) - (problem.cost.eval)(&prims, &dn)) / (2.0 * h);
                let rel = (fd - g[k]).abs() / (1.0 + g[k].abs().max(fd.abs()));
                worst = worst.max(rel);
            }
        }
    }
    Some(worst)
}
