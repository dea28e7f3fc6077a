//! Finite-horizon teams of agents acting at every stage.
//!
//! Agent i at stage t is the DM with flat index `t·N + i`, so every
//! single-stage check applies to the flattened [`TeamProblem`]. Agent-wise
//! checks deviate jointly over `{t·N + i : t < T}`.

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{config, Result};
use crate::model_core::{
    ActionSpace, CostFunction, Dist, Gaussian, InformationStructure, MeasurementMap, Override, Policy, PrimitiveSpace, Signal,
    TeamProblem,
};
use crate::montecarlo::MonteCarloPlan;
use crate::optimality::{
    finiteness_pairings, pbp_check_groups, tilted_chord_test, BestResponseClass, Certificate, CertificateVerdict,
    Evidence, PbpReport, CHORD_POINTS,
};
use crate::reduction_independent::{ReducedProblem, ReferenceMeasure};

pub type StateInitFn = Arc<dyn Fn(&[Vec<f64>]) -> Vec<f64> + Send + Sync>;
/// `(t, x_{0:t}, u_{0:t}, primitives) ↦ x_{t+1}`; `us[s][i]` is agent i at stage s.
pub type DynamicsFn = Arc<dyn Fn(usize, &[Vec<f64>], &[Vec<Vec<f64>>], &[Vec<f64>]) -> Vec<f64> + Send + Sync>;
/// `(t, i, x_{0:t}, u_{0:t−1}, primitives) ↦` noiseless part of `y_t^i`.
pub type ObsFn = Arc<dyn Fn(usize, usize, &[Vec<f64>], &[Vec<Vec<f64>>], &[Vec<f64>]) -> Vec<f64> + Send + Sync>;
/// `(t, x_t, u_t^{1:N}, primitives) ↦ c_t`.
pub type StageCostFn = Arc<dyn Fn(usize, &[f64], &[Vec<f64>], &[Vec<f64>]) -> f64 + Send + Sync>;
pub type TerminalCostFn = Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>;

/// A signal of the multistage information structure.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum MsSignal {
    Y { t: usize, agent: usize },
    U { t: usize, agent: usize },
}

#[derive(Clone)]
pub struct MultiStageTeam {
    pub name: String,
    pub horizon: usize,
    pub agents: usize,
    pub primitives: PrimitiveSpace,
    pub x0: StateInitFn,
    pub dynamics: DynamicsFn,
    /// `[t][i]` measurement dimensions.
    pub obs_dims: Vec<Vec<usize>>,
    pub obs: ObsFn,
    /// `[t][i]` additive noise primitive `v_t^i`, if any.
    pub obs_noise: Vec<Vec<Option<usize>>>,
    /// Whether measurements may depend on past actions through the state.
    pub obs_reads_actions: bool,
    pub stage_cost: StageCostFn,
    pub terminal_cost: TerminalCostFn,
    /// `[t][i]` information sets.
    pub info: Vec<Vec<Vec<MsSignal>>>,
    /// Per-agent action space, shared across stages.
    pub action_spaces: Vec<ActionSpace>,
}

impl fmt::Debug for MultiStageTeam {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("MultiStageTeam")
            .field("name", &self.name)
            .field("horizon", &self.horizon)
            .field("agents", &self.agents)
            .field("info", &self.info)
            .finish()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub xs: Vec<Vec<f64>>,
    /// `[t][i]`
    pub ys: Vec<Vec<Vec<f64>>>,
    pub us: Vec<Vec<Vec<f64>>>,
    pub stage_costs: Vec<f64>,
    pub terminal_cost: f64,
    pub total: f64,
}

impl MultiStageTeam {
    pub fn dm(&self, t: usize, agent: usize) -> usize {
        t * self.agents + agent
    }

    pub fn n_dms(&self) -> usize {
        self.horizon * self.agents
    }

    /// Flat DM indices of one agent across stages.
    pub fn agent_dms(&self, agent: usize) -> Vec<usize> {
        (0..self.horizon).map(|t| self.dm(t, agent)).collect()
    }

    pub fn violations(&self) -> Vec<String> {
        let mut out = Vec::new();
        let (tt, n) = (self.horizon, self.agents);
        if tt == 0 || n == 0 {
            out.push("horizon and agent count must be positive".into());
            return out;
        }
        if self.obs_dims.len() != tt || self.obs_dims.iter().any(|r| r.len() != n) {
            out.push("obs_dims must be horizon × agents".into());
        }
        if self.obs_noise.len() != tt || self.obs_noise.iter().any(|r| r.len() != n) {
            out.push("obs_noise must be horizon × agents".into());
        }
        if self.info.len() != tt || self.info.iter().any(|r| r.len() != n) {
            out.push("info must be horizon × agents".into());
            return out;
        }
        if self.action_spaces.len() != n {
            out.push("one action space per agent".into());
        }
        for t in 0..tt {
            for i in 0..n {
                for s in &self.info[t][i] {
                    let ok = match *s {
                        MsSignal::Y { t: s_t, agent } => s_t <= t && agent < n,
                        MsSignal::U { t: s_t, agent } => s_t < t && agent < n,
                    };
                    if !ok {
                        out.push(format!("I_{t}^{} contains {s:?}, which violates causality", i + 1));
                    }
                }
            }
        }
        out
    }

    fn split_us(&self, flat: &[Vec<f64>], stages: usize) -> Vec<Vec<Vec<f64>>> {
        (0..stages).map(|t| (0..self.agents).map(|i| flat[self.dm(t, i)].clone()).collect()).collect()
    }

    /// States `x_{0:upto}` given the actions of stages `0..upto`.
    fn states(&self, prims: &[Vec<f64>], us: &[Vec<Vec<f64>>], upto: usize) -> Vec<Vec<f64>> {
        let mut xs = vec![(self.x0)(prims)];
        for t in 0..upto {
            let x = (self.dynamics)(t, &xs, &us[..=t], prims);
            xs.push(x);
        }
        xs
    }

    fn observe(&self, t: usize, i: usize, xs: &[Vec<f64>], us: &[Vec<Vec<f64>>], prims: &[Vec<f64>]) -> Vec<f64> {
        let mut y = (self.obs)(t, i, xs, us, prims);
        if let Some(v) = self.obs_noise[t][i] {
            for (a, b) in y.iter_mut().zip(&prims[v]) {
                *a += b;
            }
        }
        y
    }

    fn total_cost(&self, prims: &[Vec<f64>], us: &[Vec<Vec<f64>>]) -> (Vec<Vec<f64>>, Vec<f64>, f64) {
        let xs = self.states(prims, us, self.horizon);
        let stage: Vec<f64> = (0..self.horizon).map(|t| (self.stage_cost)(t, &xs[t], &us[t], prims)).collect();
        let term = (self.terminal_cost)(&xs[self.horizon]);
        (xs, stage, term)
    }

    fn flat_signal(&self, s: MsSignal) -> Signal {
        match s {
            MsSignal::Y { t, agent } => Signal::Y(self.dm(t, agent)),
            MsSignal::U { t, agent } => Signal::U(self.dm(t, agent)),
        }
    }

    /// The flattened single-stage problem; measurements re-simulate the state.
    pub fn to_team_problem(&self) -> Result<TeamProblem> {
        let v = self.violations();
        if !v.is_empty() {
            return config(v.join("; "));
        }
        let me = Arc::new(self.clone());
        let n_prims = self.primitives.vars.len();
        let mut measurements = Vec::with_capacity(self.n_dms());
        for t in 0..self.horizon {
            for i in 0..self.agents {
                let dm = self.dm(t, i);
                let mut reads: Vec<Signal> = (0..n_prims).map(Signal::Prim).collect();
                if self.obs_reads_actions {
                    reads.extend((0..t * self.agents).map(Signal::U));
                }
                let m = Arc::clone(&me);
                measurements.push(MeasurementMap::new(dm, reads, self.obs_dims[t][i], format!("y_{t}^{}", i + 1), move |r| {
                    let prims: Vec<Vec<f64>> = r[..n_prims].iter().map(|x| x.to_vec()).collect();
                    let us = if m.obs_reads_actions {
                        let flat: Vec<Vec<f64>> = r[n_prims..].iter().map(|x| x.to_vec()).collect();
                        m.split_us(&flat, t)
                    } else {
                        (0..t).map(|_| m.action_spaces.iter().map(|a| vec![0.0; a.dim()]).collect()).collect()
                    };
                    let xs = m.states(&prims, &us, t);
                    m.observe(t, i, &xs, &us, &prims)
                }));
            }
        }
        let sets = (0..self.horizon)
            .flat_map(|t| (0..self.agents).map(move |i| (t, i)))
            .map(|(t, i)| self.info[t][i].iter().map(|s| self.flat_signal(*s)).collect())
            .collect();
        let m = Arc::clone(&me);
        let cost = CostFunction::new(format!("{} total cost", self.name), move |w, u| {
            let us = m.split_us(u, m.horizon);
            let (_, stage, term) = m.total_cost(w, &us);
            stage.iter().sum::<f64>() + term
        });
        Ok(TeamProblem {
            name: self.name.clone(),
            primitives: self.primitives.clone(),
            measurements,
            info: InformationStructure { sets },
            cost,
            action_spaces: (0..self.horizon).flat_map(|_| self.action_spaces.iter().cloned()).collect(),
        })
    }
}

/// Forward simulation in (t, i) order.
pub fn rollout(team: &MultiStageTeam, policy: &Policy, prims: &[Vec<f64>]) -> Result<Trajectory> {
    if policy.len() != team.n_dms() {
        return config(format!("policy has {} entries, the team has {} stage DMs", policy.len(), team.n_dms()));
    }
    let mut xs = vec![(team.x0)(prims)];
    let mut ys: Vec<Vec<Vec<f64>>> = Vec::with_capacity(team.horizon);
    let mut us: Vec<Vec<Vec<f64>>> = Vec::with_capacity(team.horizon);
    let mut stage_costs = Vec::with_capacity(team.horizon);
    for t in 0..team.horizon {
        let yt: Vec<Vec<f64>> = (0..team.agents).map(|i| team.observe(t, i, &xs, &us, prims)).collect();
        ys.push(yt);
        let mut ut = Vec::with_capacity(team.agents);
        for i in 0..team.agents {
            let mut info = Vec::new();
            for s in &team.info[t][i] {
                match *s {
                    MsSignal::Y { t: st, agent } => info.extend_from_slice(&ys[st][agent]),
                    MsSignal::U { t: st, agent } => info.extend_from_slice(&us[st][agent]),
                }
            }
            let u = policy.entries[team.dm(t, i)].eval(&info)?;
            if !team.action_spaces[i].contains(&u) {
                return Err(crate::error::TeamError::Domain { dm: team.dm(t, i), value: u });
            }
            ut.push(u);
        }
        us.push(ut);
        stage_costs.push((team.stage_cost)(t, &xs[t], &us[t], prims));
        let x = (team.dynamics)(t, &xs, &us, prims);
        xs.push(x);
    }
    let terminal_cost = (team.terminal_cost)(&xs[team.horizon]);
    let total = stage_costs.iter().sum::<f64>() + terminal_cost;
    Ok(Trajectory { xs, ys, us, stage_costs, terminal_cost, total })
}

/// Reference measures of the independent-data reduction: every stage
/// measurement with additive noise `v_t^i` is redrawn from the noise law.
pub fn independent_data_refs(team: &MultiStageTeam) -> Result<Vec<ReferenceMeasure>> {
    independent_data_refs_scaled(team, 1.0)
}

/// As [`independent_data_refs`] with Q_t^i the noise law with its covariance
/// multiplied by `q_scale`.
pub fn independent_data_refs_scaled(team: &MultiStageTeam, q_scale: f64) -> Result<Vec<ReferenceMeasure>> {
    if !(q_scale > 0.0 && q_scale.is_finite()) {
        return config(format!("q_scale must be positive, got {q_scale}"));
    }
    let me = Arc::new(team.clone());
    let noises: Vec<usize> = team.obs_noise.iter().flatten().flatten().copied().collect();
    let n_prims = team.primitives.vars.len();
    let mut refs = Vec::with_capacity(team.n_dms());
    for t in 0..team.horizon {
        for i in 0..team.agents {
            let dm = team.dm(t, i);
            let Some(v) = team.obs_noise[t][i] else {
                return config(format!("y_{t}^{} has no additive noise; no independent-data factor exists", i + 1));
            };
            let law = team.primitives.vars[v].dist.clone();
            let Dist::Gaussian(g) = &law else {
                return config(format!("noise of y_{t}^{} is not Gaussian", i + 1));
            };
            let q = Dist::Gaussian(Gaussian::new(
                g.mean.clone(),
                g.cov.iter().map(|row| row.iter().map(|c| c * q_scale).collect()).collect(),
            ));
            let prim_reads: Vec<usize> = (0..n_prims).filter(|p| !noises.contains(p)).collect();
            let mut reads: Vec<Signal> = prim_reads.iter().map(|p| Signal::Prim(*p)).collect();
            if team.obs_reads_actions {
                reads.extend((0..t * team.agents).map(Signal::U));
            }
            let m = Arc::clone(&me);
            let pr = prim_reads.clone();
            let np = prim_reads.len();
            refs.push(ReferenceMeasure::additive_with_q(dm, v, law, q, reads, move |r| {
                let mut prims = vec![Vec::new(); n_prims];
                for (slot, p) in pr.iter().enumerate() {
                    prims[*p] = r[slot].to_vec();
                }
                for (p, var) in m.primitives.vars.iter().enumerate() {
                    if prims[p].is_empty() {
                        prims[p] = vec![0.0; var.dist.dim()];
                    }
                }
                let us = if m.obs_reads_actions {
                    let flat: Vec<Vec<f64>> = r[np..].iter().map(|x| x.to_vec()).collect();
                    m.split_us(&flat, t)
                } else {
                    (0..t).map(|_| m.action_spaces.iter().map(|a| vec![0.0; a.dim()]).collect()).collect()
                };
                let xs = m.states(&prims, &us, t);
                (m.obs)(t, i, &xs, &us, &prims)
            }));
        }
    }
    Ok(refs)
}

/// The flattened team with the given stage reference measures.
pub fn reduce(team: &MultiStageTeam, refs: Vec<ReferenceMeasure>) -> Result<ReducedProblem> {
    ReducedProblem::new(team.to_team_problem()?, refs)
}

/// `∏_t ∏_i φ_t^i` along a trajectory.
pub fn independent_data_weight(team: &MultiStageTeam, refs: &[ReferenceMeasure], prims: &[Vec<f64>], traj: &Trajectory) -> Result<f64> {
    let reduced = reduce(team, refs.to_vec())?;
    let ys: Vec<Vec<f64>> = traj.ys.iter().flatten().cloned().collect();
    let us: Vec<Vec<f64>> = traj.us.iter().flatten().cloned().collect();
    reduced.weight(prims, &ys, &us)
}

/// `I_t^i ⊆ I_{t+1}^i` for every agent and stage.
pub fn check_agwise_nested(team: &MultiStageTeam) -> bool {
    (0..team.agents).all(|i| (0..team.horizon.saturating_sub(1)).all(|t| team.info[t][i].iter().all(|s| team.info[t + 1][i].contains(s))))
}

/// Joint deviations over each agent's stages.
pub fn agwise_pbp_check(team: &MultiStageTeam, policy: &Policy, plan: &MonteCarloPlan, class: &BestResponseClass) -> Result<PbpReport> {
    let flat = team.to_team_problem()?;
    let groups: Vec<Vec<usize>> = (0..team.agents).map(|i| team.agent_dms(i)).collect();
    pbp_check_groups(&flat, policy, plan, class, &groups)
}

/// One-shot deviations per (agent, stage).
pub fn dmwise_pbp_check(team: &MultiStageTeam, policy: &Policy, plan: &MonteCarloPlan, class: &BestResponseClass) -> Result<PbpReport> {
    let flat = team.to_team_problem()?;
    let groups: Vec<Vec<usize>> = (0..team.n_dms()).map(|d| vec![d]).collect();
    pbp_check_groups(&flat, policy, plan, class, &groups)
}

/// Agent-wise checks on any path model (dynamic or reduced flattening).
pub fn agwise_groups(team: &MultiStageTeam) -> Vec<Vec<usize>> {
    (0..team.agents).map(|i| team.agent_dms(i)).collect()
}

/// Promotion of DM-wise to agent-wise optimality: DM-wise pbp, per-agent
/// chord convexity of the tilted cost in the stacked actions and finite
/// pairings.
pub fn certify_agwise_global(
    team: &MultiStageTeam,
    refs: Vec<ReferenceMeasure>,
    policy: &Policy,
    plan: &MonteCarloPlan,
    class: &BestResponseClass,
) -> Result<Certificate> {
    let reduced = reduce(team, refs)?;
    let mut evidence = Vec::new();
    let dm = dmwise_pbp_check(team, policy, plan, class)?;
    let worst = dm.results.iter().fold(f64::NEG_INFINITY, |m, r| m.max(r.improvement.mean));
    evidence.push(Evidence { check: "DM-wise pbp".into(), pass: dm.pass, detail: format!("largest improvement {worst:.3e}") });
    for i in 0..team.agents {
        let dms = team.agent_dms(i);
        let (ok, gap) = tilted_chord_test(&reduced, policy, &dms, plan.seed.wrapping_add(i as u64))?;
        evidence.push(Evidence {
            check: format!("tilted-cost chord convexity, agent {}", i + 1),
            pass: ok,
            detail: format!("worst relative chord gap {gap:.3e} over {CHORD_POINTS} points"),
        });
        let (fin, detail) = finiteness_pairings(&reduced, policy, &dms, plan)?;
        evidence.push(Evidence { check: format!("finite pairings, agent {}", i + 1), pass: fin, detail });
    }
    let verdict = if evidence.iter().all(|e| e.pass) { CertificateVerdict::Certified } else { CertificateVerdict::Inconclusive };
    Ok(Certificate { verdict, evidence })
}

/// Instance returned by [`find_dmwise_not_agwise`].
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FinderHit {
    /// Cost `a0² + a1² + b·a0·a1 + d·(a0 + a1)` on `{−1, 0, 1}²`.
    pub b: f64,
    pub d: f64,
    /// Coordinate-wise minimal profile.
    pub point: (f64, f64),
    pub point_cost: f64,
    pub best: (f64, f64),
    pub best_cost: f64,
}

pub const FINDER_GRID: [f64; 3] = [-1.0, 0.0, 1.0];

pub fn finder_cost(b: f64, d: f64, a0: f64, a1: f64) -> f64 {
    a0 * a0 + a1 * a1 + b * a0 * a1 + d * (a0 + a1)
}

/// Brute-force search for a two-stage single-agent cost on `{−1, 0, 1}²`
/// with a profile that no single stage can improve but the agent can.
pub fn find_dmwise_not_agwise() -> Option<FinderHit> {
    let bs: Vec<f64> = (0..=16).map(|k| -4.0 + 0.5 * k as f64).collect();
    let ds: Vec<f64> = (0..=4).map(|k| -1.0 + 0.5 * k as f64).collect();
    for &b in &bs {
        for &d in &ds {
            let c = |x: f64, y: f64| finder_cost(b, d, x, y);
            let mut best = (FINDER_GRID[0], FINDER_GRID[0]);
            for &x in &FINDER_GRID {
                for &y in &FINDER_GRID {
                    if c(x, y) < c(best.0, best.1) {
                        best = (x, y);
                    }
                }
            }
            let best_cost = c(best.0, best.1);
            for &x in &FINDER_GRID {
                for &y in &FINDER_GRID {
                    let v = c(x, y);
                    let coordinatewise = FINDER_GRID.iter().all(|z| c(*z, y) >= v) && FINDER_GRID.iter().all(|z| c(x, *z) >= v);
                    if coordinatewise && v > best_cost + 1e-9 {
                        return Some(FinderHit { b, d, point: (x, y), point_cost: v, best, best_cost });
                    }
                }
            }
        }
    }
    None
}

/// Two-stage single-agent team realizing a finder hit: `x₁ = a₀`,
/// `c₀ = a₀² + d a₀`, `c₁ = a₁² + b x₁ a₁ + d a₁`, constant information.
pub fn finder_team(hit: &FinderHit) -> MultiStageTeam {
    let (b, d) = (hit.b, hit.d);
    let mut prims = PrimitiveSpace::new();
    let x0 = prims.push("x0", Dist::finite_scalar(&[0.0], &[1.0]));
    MultiStageTeam {
        name: format!("finder(b={b}, d={d})"),
        horizon: 2,
        agents: 1,
        primitives: prims,
        x0: Arc::new(move |p| p[x0].clone()),
        dynamics: Arc::new(|_, _, us, _| us.last().map(|u| u[0].clone()).unwrap_or_default()),
        obs_dims: vec![vec![1], vec![1]],
        obs: Arc::new(move |_, _, _, _, p| p[x0].clone()),
        obs_noise: vec![vec![None], vec![None]],
        obs_reads_actions: false,
        stage_cost: Arc::new(move |t, x, u, _| {
            let a = u[0][0];
            if t == 0 {
                a * a + d * a
            } else {
                a * a + b * x[0] * a + d * a
            }
        }),
        terminal_cost: Arc::new(|_| 0.0),
        info: vec![vec![vec![]], vec![vec![]]],
        action_spaces: vec![ActionSpace::boxed(vec![-1.0], vec![1.0])],
    }
}

/// Identity references for teams whose measurements read primitives only.
pub fn identity_refs(team: &MultiStageTeam) -> Result<Vec<ReferenceMeasure>> {
    if team.obs_reads_actions {
        return config("measurements read actions; identity references do not apply");
    }
    let flat = team.to_team_problem()?;
    Ok((0..team.n_dms()).map(|dm| ReferenceMeasure::identity(dm, Dist::Gaussian(Gaussian::standard(flat.measurements[dm].dim)))).collect())
}

/// Linear-Gaussian family on a scalar shared state:
/// `x_{t+1} = a x_t + Σ_i b_i u_t^i + w_t`, `y_t^i = c_i x_t + v_t^i`,
/// `c_t = q x_t² + r Σ_i (u_t^i)² + s (Σ_i u_t^i − x_t)²`, `c_T = q_T x_T²`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearGaussianConfig {
    #[serde(default = "default_name")]
    pub name: String,
    pub horizon: usize,
    pub agents: usize,
    #[serde(default = "one")]
    pub a: f64,
    #[serde(default)]
    pub b: Vec<f64>,
    #[serde(default)]
    pub c: Vec<f64>,
    #[serde(default = "one")]
    pub x0_var: f64,
    #[serde(default = "one")]
    pub w_var: f64,
    #[serde(default = "one")]
    pub v_var: f64,
    #[serde(default)]
    pub q: f64,
    #[serde(default = "one")]
    pub r: f64,
    #[serde(default = "one")]
    pub s: f64,
    #[serde(default)]
    pub q_terminal: f64,
    /// `recall` (I_t^i = y_{0:t}^i) or `memoryless` (I_t^i = y_t^i).
    #[serde(default = "recall")]
    pub info: String,
}

fn default_name() -> String {
    "linear-gaussian".into()
}

fn one() -> f64 {
    1.0
}

fn recall() -> String {
    "recall".into()
}

impl LinearGaussianConfig {
    pub fn build(&self) -> Result<MultiStageTeam> {
        let (tt, n) = (self.horizon, self.agents);
        if tt == 0 || n == 0 {
            return config("horizon and agents must be positive");
        }
        let b = if self.b.is_empty() { vec![0.0; n] } else { self.b.clone() };
        let c = if self.c.is_empty() { vec![1.0; n] } else { self.c.clone() };
        if b.len() != n || c.len() != n {
            return config("b and c need one entry per agent");
        }
        if !(self.x0_var > 0.0 && self.w_var > 0.0 && self.v_var > 0.0) {
            return config("variances must be positive");
        }
        if !(self.r >= 0.0 && self.s >= 0.0 && self.q >= 0.0 && self.q_terminal >= 0.0) {
            return config("cost weights must be nonnegative");
        }
        let recall = match self.info.as_str() {
            "recall" => true,
            "memoryless" => false,
            other => return config(format!("unknown info pattern '{other}'")),
        };
        let mut prims = PrimitiveSpace::new();
        let x0 = prims.push("x0", Dist::normal(0.0, self.x0_var));
        let w: Vec<usize> = (0..tt.saturating_sub(1)).map(|t| prims.push(format!("w{t}"), Dist::normal(0.0, self.w_var))).collect();
        let v: Vec<Vec<Option<usize>>> =
            (0..tt).map(|t| (0..n).map(|i| Some(prims.push(format!("v{t}_{}", i + 1), Dist::normal(0.0, self.v_var)))).collect()).collect();
        let (a, q, r, s, qt) = (self.a, self.q, self.r, self.s, self.q_terminal);
        let controlled = b.iter().any(|x| *x != 0.0);
        let b2 = b.clone();
        let w2 = w.clone();
        let info = (0..tt)
            .map(|t| {
                (0..n)
                    .map(|i| {
                        let from = if recall { 0 } else { t };
                        (from..=t).map(|s| MsSignal::Y { t: s, agent: i }).collect()
                    })
                    .collect()
            })
            .collect();
        Ok(MultiStageTeam {
            name: self.name.clone(),
            horizon: tt,
            agents: n,
            primitives: prims,
            x0: Arc::new(move |p| p[x0].clone()),
            dynamics: Arc::new(move |t, xs, us, p| {
                let push: f64 = us[t].iter().zip(&b2).map(|(u, bi)| bi * u[0]).sum();
                let noise = w2.get(t).map_or(0.0, |k| p[*k][0]);
                vec![a * xs[t][0] + push + noise]
            }),
            obs_dims: vec![vec![1; n]; tt],
            obs: Arc::new(move |t, i, xs, _, _| vec![c[i] * xs[t][0]]),
            obs_noise: v,
            obs_reads_actions: controlled,
            stage_cost: Arc::new(move |_, x, u, _| {
                let sum: f64 = u.iter().map(|a| a[0]).sum();
                q * x[0] * x[0] + r * u.iter().map(|a| a[0] * a[0]).sum::<f64>() + s * (sum - x[0]).powi(2)
            }),
            terminal_cost: Arc::new(move |x| qt * x[0] * x[0]),
            info,
            action_spaces: vec![ActionSpace::free(1); n],
        })
    }
}

/// Zero policy for every stage DM.
pub fn zero_policy(team: &MultiStageTeam) -> Result<Policy> {
    let flat = team.to_team_problem()?;
    Ok(Policy::new((0..team.n_dms()).map(|dm| Policy::constant(flat.info_dim_of(dm), vec![0.0; flat.action_spaces[dm].dim()])).collect()))
}

/// Pathwise comparison of [`rollout`] against the flattened problem.
pub fn rollout_matches_flat(team: &MultiStageTeam, policy: &Policy, prims: &[Vec<f64>]) -> Result<f64> {
    let traj = rollout(team, policy, prims)?;
    let flat = team.to_team_problem()?;
    let o = flat.run_path(policy, prims, Override::None, false)?;
    Ok((o.cost - traj.total).abs())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::substream;

    fn lg(t: usize, info: &str) -> MultiStageTeam {
        LinearGaussianConfig {
            name: "t".into(),
            horizon: t,
            agents: 2,
            a: 0.9,
            b: vec![0.5, -0.3],
            c: vec![1.0, 0.7],
            x0_var: 1.0,
            w_var: 0.5,
            v_var: 0.8,
            q: 1.0,
            r: 0.5,
            s: 1.0,
            q_terminal: 1.0,
            info: info.into(),
        }
        .build()
        .unwrap()
    }

    #[test]
    fn rollout_agrees_with_flat_problem() {
        let team = lg(2, "recall");
        let flat = team.to_team_problem().unwrap();
        let p = Policy::new(
            (0..4).map(|dm| Policy::affine(vec![vec![0.3; flat.info_dim_of(dm)]], vec![0.1 * dm as f64])).collect(),
        );
        let mut rng = substream(5, 0, 0);
        for _ in 0..50 {
            let prims = team.primitives.draw(&mut rng).values;
            assert!(rollout_matches_flat(&team, &p, &prims).unwrap() < 1e-12);
        }
    }

    #[test]
    fn nested_patterns() {
        assert!(check_agwise_nested(&lg(3, "recall")));
        assert!(!check_agwise_nested(&lg(3, "memoryless")));
    }

    #[test]
    fn terminal_only_cost() {
        let mut team = lg(2, "recall");
        team.stage_cost = Arc::new(|_, _, _, _| 0.0);
        team.terminal_cost = Arc::new(|x| x[0] * x[0]);
        let p = zero_policy(&team).unwrap();
        let mut rng = substream(1, 0, 0);
        let prims = team.primitives.draw(&mut rng).values;
        let tr = rollout(&team, &p, &prims).unwrap();
        assert_eq!(tr.total, tr.xs[2][0] * tr.xs[2][0]);
    }

    #[test]
    fn finder_hits_the_first_indefinite_cost() {
        let hit = find_dmwise_not_agwise().unwrap();
        assert_eq!((hit.b, hit.d), (-4.0, -1.0));
        assert_eq!(hit.point, (-1.0, -1.0));
        assert_eq!(hit.best, (1.0, 1.0));
        assert_eq!((hit.point_cost, hit.best_cost), (0.0, -4.0));
    }

    #[test]
    fn causality_violations_are_reported() {
        let mut team = lg(2, "recall");
        team.info[0][0].push(MsSignal::Y { t: 1, agent: 0 });
        assert!(!team.violations().is_empty());
    }
}
