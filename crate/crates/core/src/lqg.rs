//! Partially nested LQG teams: static gains from the stacked stationarity
//! system, static-to-dynamic gain transport and closed-form costs.
//!
//! DM i observes `ŷ_k` for every `k ∈ ↓i ∪ {i}` in increasing order, with
//! `ŷ^D_k = H_k ζ + Σ_{j∈↓k} B_kj u_j` and `ŷ^S_k = H_k ζ`. The cost is
//! `ζ'Qζ + u'Ru + 2u'Sζ`.

use std::collections::{BTreeMap, BTreeSet};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{config, Result, TeamError};
use crate::model_core::{
    ActionSpace, CostFunction, Dist, InformationStructure, MeasurementMap, Policy, PolicyRep, PrimitiveSpace, Signal,
    TeamProblem,
};
use crate::reduction_dependent::{InvertibleObservation, ObservationDecomposition};

#[derive(Clone, Debug)]
pub struct LqgTeam {
    pub sigma: DMatrix<f64>,
    pub h: Vec<DMatrix<f64>>,
    /// `B_ij` keyed by (i, j), 0-based, j < i.
    pub b: BTreeMap<(usize, usize), DMatrix<f64>>,
    pub u_dims: Vec<usize>,
    pub q: DMatrix<f64>,
    pub r: DMatrix<f64>,
    pub s: DMatrix<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GainSet {
    /// `I_i = ↓i ∪ {i}` in increasing order; gain columns follow it.
    pub blocks: Vec<Vec<usize>>,
    pub g: Option<Vec<DMatrix<f64>>>,
    pub k: Option<Vec<DMatrix<f64>>>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LqgForm {
    S,
    D,
}

fn is_symmetric(m: &DMatrix<f64>) -> bool {
    m.is_square() && (m - m.transpose()).amax() <= 1e-12 * (1.0 + m.amax())
}

impl LqgTeam {
    pub fn n(&self) -> usize {
        self.h.len()
    }

    pub fn zeta_dim(&self) -> usize {
        self.sigma.nrows()
    }

    pub fn y_dims(&self) -> Vec<usize> {
        self.h.iter().map(|m| m.nrows()).collect()
    }

    fn u_offsets(&self) -> Vec<usize> {
        offsets(&self.u_dims)
    }

    /// Transitive closure of the declared mixing links.
    pub fn precedence(&self) -> Vec<BTreeSet<usize>> {
        let n = self.n();
        let mut down = vec![BTreeSet::new(); n];
        for i in 0..n {
            let mut d = BTreeSet::new();
            for (&(a, j), _) in self.b.range((i, 0)..(i + 1, 0)) {
                debug_assert_eq!(a, i);
                d.insert(j);
                d.extend(down[j].iter().copied());
            }
            down[i] = d;
        }
        down
    }

    pub fn blocks(&self) -> Vec<Vec<usize>> {
        self.precedence()
            .into_iter()
            .enumerate()
            .map(|(i, mut d)| {
                d.insert(i);
                d.into_iter().collect()
            })
            .collect()
    }

    /// Every violated invariant.
    pub fn violations(&self) -> Vec<String> {
        let mut out = Vec::new();
        let n = self.n();
        let nz = self.zeta_dim();
        let nu: usize = self.u_dims.iter().sum();
        if n == 0 {
            out.push("team has no DMs".into());
        }
        if self.u_dims.len() != n {
            out.push(format!("{} action dimensions for {} DMs", self.u_dims.len(), n));
            return out;
        }
        if !is_symmetric(&self.sigma) || self.sigma.clone().cholesky().is_none() {
            out.push("Sigma_zeta must be symmetric positive definite".into());
        }
        for (i, h) in self.h.iter().enumerate() {
            if h.ncols() != nz {
                out.push(format!("H{} has {} columns, zeta has {}", i + 1, h.ncols(), nz));
            }
        }
        for (&(i, j), m) in &self.b {
            if j >= i || i >= n {
                out.push(format!("B({},{}) breaks sequential order", i + 1, j + 1));
            } else if m.nrows() != self.h[i].nrows() || m.ncols() != self.u_dims[j] {
                out.push(format!("B({},{}) has shape {}x{}", i + 1, j + 1, m.nrows(), m.ncols()));
            }
        }
        if self.q.shape() != (nz, nz) || !is_symmetric(&self.q) {
            out.push("Q must be symmetric with the dimension of zeta".into());
        } else if self.q.clone().symmetric_eigenvalues().min() < -1e-12 * (1.0 + self.q.amax()) {
            out.push("Q must be positive semidefinite".into());
        }
        if self.r.shape() != (nu, nu) || !is_symmetric(&self.r) || self.r.clone().cholesky().is_none() {
            out.push("R must be symmetric positive definite".into());
        }
        if self.s.shape() != (nu, nz) {
            out.push(format!("S must be {nu}x{nz}"));
        }
        out
    }

    fn check(&self) -> Result<()> {
        let v = self.violations();
        if v.is_empty() {
            Ok(())
        } else {
            config(v.join("; "))
        }
    }

    /// Stacked `[H_k]_{k∈I_i}`.
    fn p_matrix(&self, block: &[usize]) -> DMatrix<f64> {
        stack_rows(&block.iter().map(|k| self.h[*k].clone()).collect::<Vec<_>>(), self.zeta_dim())
    }

    /// The equivalent dynamic team problem with its decomposition.
    pub fn to_problem(&self, name: &str) -> Result<(TeamProblem, InvertibleObservation)> {
        self.check()?;
        let n = self.n();
        let down = self.precedence();
        let blocks = self.blocks();
        let mut prims = PrimitiveSpace::new();
        let zeta = prims.push("zeta", Dist::gaussian(vec![0.0; self.zeta_dim()], to_rows(&self.sigma)));
        let mut measurements = Vec::with_capacity(n);
        let mut parts = Vec::with_capacity(n);
        for i in 0..n {
            let h = self.h[i].clone();
            let mats: Vec<(usize, DMatrix<f64>)> = down[i]
                .iter()
                .map(|j| (*j, self.b.get(&(i, *j)).cloned().unwrap_or_else(|| DMatrix::zeros(h.nrows(), self.u_dims[*j]))))
                .collect();
            let mut reads = vec![Signal::Prim(zeta)];
            reads.extend(mats.iter().map(|(j, _)| Signal::U(*j)));
            let (h1, m1) = (h.clone(), mats.clone());
            measurements.push(MeasurementMap::new(i, reads, h.nrows(), format!("H{0} zeta + B{0}. u", i + 1), move |r| {
                let mut y = &h1 * DVector::from_column_slice(r[0]);
                for ((_, b), u) in m1.iter().zip(&r[1..]) {
                    y += b * DVector::from_column_slice(u);
                }
                y.as_slice().to_vec()
            }));
            let h2 = h.clone();
            parts.push(ObservationDecomposition::additive(
                i,
                vec![zeta],
                h.nrows(),
                move |r| (&h2 * DVector::from_column_slice(r[0])).as_slice().to_vec(),
                mats.iter().map(|(j, b)| (*j, to_rows(b))).collect(),
            ));
        }
        let sets = blocks.iter().map(|b| b.iter().map(|k| Signal::Y(*k)).collect()).collect();
        let (q, r, s) = (self.q.clone(), self.r.clone(), self.s.clone());
        let (r2, s2) = (r.clone(), s.clone());
        let offs = self.u_offsets();
        let dims = self.u_dims.clone();
        let cost = CostFunction::new("zeta'Q zeta + u'R u + 2u'S zeta", move |w, u| {
            let z = DVector::from_column_slice(&w[0]);
            let uu = DVector::from_iterator(u.iter().map(Vec::len).sum(), u.iter().flatten().copied());
            (z.transpose() * &q * &z)[(0, 0)] + (uu.transpose() * &r * &uu)[(0, 0)] + 2.0 * (uu.transpose() * &s * &z)[(0, 0)]
        })
        .with_grad(move |w, u, dm| {
            let z = DVector::from_column_slice(&w[0]);
            let uu = DVector::from_iterator(u.iter().map(Vec::len).sum(), u.iter().flatten().copied());
            let g = (&r2 * &uu + &s2 * &z) * 2.0;
            g.rows(offs[dm], dims[dm]).iter().copied().collect()
        })
        .convex(true);
        let problem = TeamProblem {
            name: name.into(),
            primitives: prims,
            measurements,
            info: InformationStructure { sets },
            cost,
            action_spaces: self.u_dims.iter().map(|d| ActionSpace::free(*d)).collect(),
        };
        Ok((problem, InvertibleObservation::new(parts)))
    }
}

fn offsets(dims: &[usize]) -> Vec<usize> {
    let mut o = Vec::with_capacity(dims.len());
    let mut acc = 0;
    for d in dims {
        o.push(acc);
        acc += d;
    }
    o
}

fn stack_rows(ms: &[DMatrix<f64>], cols: usize) -> DMatrix<f64> {
    let rows: usize = ms.iter().map(|m| m.nrows()).sum();
    let mut out = DMatrix::zeros(rows, cols);
    let mut at = 0;
    for m in ms {
        out.view_mut((at, 0), (m.nrows(), cols)).copy_from(m);
        at += m.nrows();
    }
    out
}

pub fn to_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|r| m.row(r).iter().copied().collect()).collect()
}

pub fn from_rows(rows: &[Vec<f64>]) -> Result<DMatrix<f64>> {
    let r = rows.len();
    let c = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|row| row.len() != c) {
        return config("ragged matrix");
    }
    Ok(DMatrix::from_fn(r, c, |i, j| rows[i][j]))
}

/// Static gains from the stacked stationarity system
/// `Σ_j R_ij G_j Σ_{y_j y_i} + S_i Σ_{ζ y_i} = 0`, solved as one linear system.
pub fn solve_static_gains(team: &LqgTeam) -> Result<GainSet> {
    team.check()?;
    let n = team.n();
    let blocks = team.blocks();
    let ps: Vec<DMatrix<f64>> = blocks.iter().map(|b| team.p_matrix(b)).collect();
    let uo = team.u_offsets();
    let shapes: Vec<(usize, usize)> = (0..n).map(|i| (team.u_dims[i], ps[i].nrows())).collect();
    let xo = offsets(&shapes.iter().map(|(a, b)| a * b).collect::<Vec<_>>());
    let total: usize = shapes.iter().map(|(a, b)| a * b).sum();
    let mut a = DMatrix::zeros(total, total);
    let mut rhs = DVector::zeros(total);
    for i in 0..n {
        let (di, mi) = shapes[i];
        for j in 0..n {
            let (dj, mj) = shapes[j];
            let c_ij = &ps[i] * &team.sigma * ps[j].transpose();
            let r_ij = team.r.view((uo[i], uo[j]), (di, dj)).clone_owned();
            a.view_mut((xo[i], xo[j]), (di * mi, dj * mj)).copy_from(&c_ij.kronecker(&r_ij));
        }
        let s_i = team.s.view((uo[i], 0), (di, team.zeta_dim())).clone_owned();
        let b = -(s_i * &team.sigma * ps[i].transpose());
        rhs.rows_mut(xo[i], di * mi).copy_from_slice(b.as_slice());
    }
    let x = a
        .clone()
        .lu()
        .solve(&rhs)
        .ok_or_else(|| TeamError::Singular("stacked gain system is rank deficient (degenerate observation covariance)".into()))?;
    let resid = (&a * &x - &rhs).norm();
    if !(resid <= 1e-10 * (1.0 + rhs.norm()) * (1.0 + a.norm())) || x.iter().any(|v| !v.is_finite()) {
        return Err(TeamError::Singular(format!("stacked gain system residual {resid:.3e}")));
    }
    let g = (0..n)
        .map(|i| {
            let (di, mi) = shapes[i];
            DMatrix::from_column_slice(di, mi, &x.as_slice()[xo[i]..xo[i] + di * mi])
        })
        .collect();
    Ok(GainSet { blocks, g: Some(g), k: None })
}

/// Block Gauss–Seidel on the same stationarity equations.
pub fn solve_static_gains_iterative(team: &LqgTeam, max_iter: usize, tol: f64) -> Result<GainSet> {
    team.check()?;
    let n = team.n();
    let blocks = team.blocks();
    let ps: Vec<DMatrix<f64>> = blocks.iter().map(|b| team.p_matrix(b)).collect();
    let uo = team.u_offsets();
    let mut g: Vec<DMatrix<f64>> = (0..n).map(|i| DMatrix::zeros(team.u_dims[i], ps[i].nrows())).collect();
    let r_blk = |i: usize, j: usize| team.r.view((uo[i], uo[j]), (team.u_dims[i], team.u_dims[j])).clone_owned();
    let c = |i: usize, j: usize| &ps[i] * &team.sigma * ps[j].transpose();
    for _ in 0..max_iter {
        let mut delta: f64 = 0.0;
        for i in 0..n {
            let s_i = team.s.view((uo[i], 0), (team.u_dims[i], team.zeta_dim())).clone_owned();
            let mut m = s_i * &team.sigma * ps[i].transpose();
            for j in (0..n).filter(|j| *j != i) {
                m += r_blk(i, j) * &g[j] * c(j, i);
            }
            let rinv = r_blk(i, i).try_inverse().ok_or_else(|| TeamError::Singular(format!("R block of DM {}", i + 1)))?;
            let cinv = c(i, i).try_inverse().ok_or_else(|| TeamError::Singular(format!("observation covariance of DM {}", i + 1)))?;
            let next = -(rinv * m * cinv);
            delta = delta.max((&next - &g[i]).amax());
            g[i] = next;
        }
        if delta <= tol {
            return Ok(GainSet { blocks, g: Some(g), k: None });
        }
    }
    Err(TeamError::Singular(format!("fixed-point iteration did not converge in {max_iter} sweeps")))
}

/// Dynamic gains inducing the same actions as the static gains G.
///
/// In index order, each DM's static signals are rewritten in terms of its
/// dynamic ones, `ŷ^S_k = ŷ^D_k − Σ_j B_kj K_j ŷ^D_{I_j}`, so `K_i = G_i M_i`.
/// On a single link this is `K_i^j = G_i^j − G_i^i B_ij K_j`, `K_i^i = G_i^i`.
pub fn transport_gains_g_to_k(team: &LqgTeam, gains: &GainSet) -> Result<GainSet> {
    let g = gains.g.as_ref().ok_or_else(|| TeamError::Config("static gains missing".into()))?;
    let n = team.n();
    let ydims = team.y_dims();
    let down = team.precedence();
    let blocks = &gains.blocks;
    let mut k: Vec<DMatrix<f64>> = Vec::with_capacity(n);
    for i in 0..n {
        let bi = &blocks[i];
        let yo: BTreeMap<usize, usize> = bi.iter().zip(offsets(&bi.iter().map(|x| ydims[*x]).collect::<Vec<_>>())).map(|(a, b)| (*a, b)).collect();
        let width: usize = bi.iter().map(|x| ydims[*x]).sum();
        let select = |block: &[usize]| -> DMatrix<f64> {
            let rows: usize = block.iter().map(|x| ydims[*x]).sum();
            let mut e = DMatrix::zeros(rows, width);
            let mut at = 0;
            for x in block {
                for r in 0..ydims[*x] {
                    e[(at + r, yo[x] + r)] = 1.0;
                }
                at += ydims[*x];
            }
            e
        };
        let mut m = DMatrix::zeros(width, width);
        for x in bi {
            let mut rowblk = select(&[*x]);
            for j in &down[*x] {
                if let Some(b) = team.b.get(&(*x, *j)) {
                    rowblk -= b * &k[*j] * select(&blocks[*j]);
                }
            }
            m.view_mut((yo[x], 0), (ydims[*x], width)).copy_from(&rowblk);
        }
        k.push(&g[i] * m);
    }
    Ok(GainSet { blocks: blocks.clone(), g: gains.g.clone(), k: Some(k) })
}

/// Closed-form expected cost of the linear policy in the requested form.
pub fn exact_cost(team: &LqgTeam, gains: &GainSet, form: LqgForm) -> Result<f64> {
    team.check()?;
    let f = closed_loop_map(team, gains, form)?;
    let sig = &team.sigma;
    let j = (&team.q * sig).trace() + (&team.r * &f * sig * f.transpose()).trace() + 2.0 * (&team.s * sig * f.transpose()).trace();
    Ok(j)
}

/// `u = F ζ` under the linear policy.
pub fn closed_loop_map(team: &LqgTeam, gains: &GainSet, form: LqgForm) -> Result<DMatrix<f64>> {
    let n = team.n();
    let nz = team.zeta_dim();
    let nu: usize = team.u_dims.iter().sum();
    let uo = team.u_offsets();
    let ydims = team.y_dims();
    let yo = offsets(&ydims);
    let ny: usize = ydims.iter().sum();
    let gs = match form {
        LqgForm::S => gains.g.as_ref(),
        LqgForm::D => gains.k.as_ref(),
    }
    .ok_or_else(|| TeamError::Config("gains for the requested form are missing".into()))?;
    let mut kf = DMatrix::zeros(nu, ny);
    for i in 0..n {
        let mut at = 0;
        for x in &gains.blocks[i] {
            let gi = &gs[i];
            if gi.nrows() != team.u_dims[i] {
                return config(format!("gain of DM {} has {} rows", i + 1, gi.nrows()));
            }
            if at + ydims[*x] > gi.ncols() {
                return config(format!("gain of DM {} has {} columns", i + 1, gi.ncols()));
            }
            kf.view_mut((uo[i], yo[*x]), (team.u_dims[i], ydims[*x])).copy_from(&gi.view((0, at), (team.u_dims[i], ydims[*x])));
            at += ydims[*x];
        }
        if at != gs[i].ncols() {
            return config(format!("gain of DM {} has {} columns, expected {}", i + 1, gs[i].ncols(), at));
        }
    }
    let hs = stack_rows(&team.h, nz);
    match form {
        LqgForm::S => Ok(kf * hs),
        LqgForm::D => {
            let mut bm = DMatrix::zeros(ny, nu);
            for (&(i, j), b) in &team.b {
                bm.view_mut((yo[i], uo[j]), (ydims[i], team.u_dims[j])).copy_from(b);
            }
            let lhs = DMatrix::identity(nu, nu) - &kf * bm;
            lhs.lu().solve(&(kf * hs)).ok_or_else(|| TeamError::Singular("closed loop I − K B is singular".into()))
        }
    }
}

/// Affine policy with zero bias from a gain list.
pub fn gains_to_policy(gains: &[DMatrix<f64>]) -> Policy {
    Policy::new(gains.iter().map(|g| PolicyRep::Affine { gain: to_rows(g), bias: vec![0.0; g.nrows()] }).collect())
}

/// Gains of an affine policy (biases ignored).
pub fn policy_to_gains(policy: &Policy) -> Result<Vec<DMatrix<f64>>> {
    policy
        .entries
        .iter()
        .enumerate()
        .map(|(i, e)| match e {
            PolicyRep::Affine { gain, .. } => from_rows(gain),
            _ => config(format!("policy of DM {} is not affine", i + 1)),
        })
        .collect()
}

/// LQG configuration file.
#[derive(Clone, Debug, Deserialize, Serialize)]
pub struct LqgConfig {
    #[serde(rename = "N")]
    pub n: usize,
    pub dims: LqgDims,
    #[serde(rename = "Sigma_zeta")]
    pub sigma_zeta: Vec<Vec<f64>>,
    #[serde(rename = "H")]
    pub h: Vec<Vec<Vec<f64>>>,
    #[serde(rename = "B", default)]
    pub b: BTreeMap<String, Vec<Vec<f64>>>,
    #[serde(rename = "Q")]
    pub q: Vec<Vec<f64>>,
    #[serde(rename = "R")]
    pub r: Vec<Vec<f64>>,
    #[serde(rename = "S", default)]
    pub s: Option<Vec<Vec<f64>>>,
}

#[derive(Clone, Debug, Deserialize, Serialize)]
pub struct LqgDims {
    pub zeta: usize,
    pub u: Vec<usize>,
}

fn parse_pair(key: &str) -> Result<(usize, usize)> {
    let inner = key.trim().trim_start_matches('(').trim_end_matches(')');
    let mut it = inner.split(',').map(|x| x.trim().parse::<usize>());
    match (it.next(), it.next(), it.next()) {
        (Some(Ok(i)), Some(Ok(j)), None) if i >= 1 && j >= 1 => Ok((i - 1, j - 1)),
        _ => config(format!("B key '{key}' is not of the form \"(i,j)\" with 1-based indices")),
    }
}

impl LqgConfig {
    pub fn to_team(&self) -> Result<LqgTeam> {
        if self.h.len() != self.n || self.dims.u.len() != self.n {
            return config(format!("N = {} but H has {} and dims.u has {} entries", self.n, self.h.len(), self.dims.u.len()));
        }
        let sigma = from_rows(&self.sigma_zeta)?;
        if sigma.nrows() != self.dims.zeta {
            return config("Sigma_zeta does not match dims.zeta");
        }
        let mut b = BTreeMap::new();
        for (key, m) in &self.b {
            b.insert(parse_pair(key)?, from_rows(m)?);
        }
        let nu: usize = self.dims.u.iter().sum();
        let s = match &self.s {
            Some(s) => from_rows(s)?,
            None => DMatrix::zeros(nu, self.dims.zeta),
        };
        let team = LqgTeam {
            sigma,
            h: self.h.iter().map(|m| from_rows(m)).collect::<Result<_>>()?,
            b,
            u_dims: self.dims.u.clone(),
            q: from_rows(&self.q)?,
            r: from_rows(&self.r)?,
            s,
        };
        team.check()?;
        Ok(team)
    }

    pub fn from_team(team: &LqgTeam) -> Self {
        LqgConfig {
            n: team.n(),
            dims: LqgDims { zeta: team.zeta_dim(), u: team.u_dims.clone() },
            sigma_zeta: to_rows(&team.sigma),
            h: team.h.iter().map(to_rows).collect(),
            b: team.b.iter().map(|(&(i, j), m)| (format!("({},{})", i + 1, j + 1), to_rows(m))).collect(),
            q: to_rows(&team.q),
            r: to_rows(&team.r),
            s: Some(to_rows(&team.s)),
        }
    }
}

/// Gains as JSON with one labelled block per observed signal.
pub fn gains_json(team: &LqgTeam, gains: &GainSet) -> serde_json::Value {
    let ydims = team.y_dims();
    let side = |name: &str, gs: &Option<Vec<DMatrix<f64>>>| -> serde_json::Value {
        let Some(gs) = gs else { return serde_json::Value::Null };
        let mut dms = Vec::new();
        for (i, g) in gs.iter().enumerate() {
            let mut blocks = serde_json::Map::new();
            let mut at = 0;
            for x in &gains.blocks[i] {
                let part = g.view((0, at), (g.nrows(), ydims[*x])).clone_owned();
                blocks.insert(format!("{}_{}^{}", name, i + 1, x + 1), serde_json::json!(to_rows(&part)));
                at += ydims[*x];
            }
            dms.push(serde_json::Value::Object(blocks));
        }
        serde_json::Value::Array(dms)
    };
    serde_json::json!({ "G": side("G", &gains.g), "K": side("K", &gains.k) })
}
