//! Block-parallel integration engine.
//!
//! Integrals over a product of [`Dist`] laws are computed three ways: Monte
//! Carlo over fixed-size blocks with per-block substreams, exhaustive
//! enumeration of finite supports, or tensor Gauss quadrature for Gaussian
//! and uniform coordinates. Block results are merged in block order, so the
//! output does not depend on the number of worker threads.

use nalgebra::{DMatrix, SymmetricEigen};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{config, Result};
use crate::model_core::Dist;
use crate::rng::{substream, Rng};

/// Number of paths per Monte Carlo block.
pub const BLOCK: usize = 2048;

/// Largest tensor grid accepted by exact or quadrature integration.
pub const MAX_GRID: usize = 4_000_000;

/// Environment variable capping the worker count.
pub const THREADS_ENV: &str = "TEAMRED_THREADS";

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum Sampling {
    MonteCarlo,
    /// Exhaustive enumeration; every coordinate must have finite support.
    Exact,
    /// Tensor Gauss–Hermite / Gauss–Legendre rule with this many nodes per coordinate.
    Quadrature(usize),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MonteCarloPlan {
    pub samples: usize,
    pub seed: u64,
    pub common_random_numbers: bool,
    pub sampling: Sampling,
    pub fd_step: f64,
}

impl Default for MonteCarloPlan {
    fn default() -> Self {
        MonteCarloPlan {
            samples: 20_000,
            seed: 42,
            common_random_numbers: true,
            sampling: Sampling::MonteCarlo,
            fd_step: 1e-5,
        }
    }
}

impl MonteCarloPlan {
    pub fn monte_carlo(samples: usize, seed: u64) -> Self {
        MonteCarloPlan { samples, seed, ..Default::default() }
    }

    pub fn exact() -> Self {
        MonteCarloPlan { sampling: Sampling::Exact, ..Default::default() }
    }

    pub fn quadrature(nodes: usize) -> Self {
        MonteCarloPlan { sampling: Sampling::Quadrature(nodes), ..Default::default() }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn is_deterministic(&self) -> bool {
        !matches!(self.sampling, Sampling::MonteCarlo)
    }

    pub fn validate(&self) -> Result<()> {
        if self.samples == 0 && !self.is_deterministic() {
            return config("samples must be at least 1");
        }
        if !(self.fd_step > 0.0) {
            return config("fd_step must be positive");
        }
        if let Sampling::Quadrature(0) = self.sampling {
            return config("quadrature needs at least one node");
        }
        Ok(())
    }

    /// Stream label for paired comparisons: shared under common random numbers.
    pub fn pair_stream(&self, stream: u64, arm: u64) -> u64 {
        if self.common_random_numbers {
            stream
        } else {
            crate::rng::child(stream, arm)
        }
    }
}

/// A mean with its standard error.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub mean: f64,
    pub std_error: f64,
    pub n: usize,
}

impl Estimate {
    pub fn exact(mean: f64) -> Self {
        Estimate { mean, std_error: 0.0, n: 1 }
    }
}

/// Neumaier compensated accumulator.
#[derive(Clone, Copy, Debug, Default)]
pub struct KahanSum {
    sum: f64,
    comp: f64,
}

impl KahanSum {
    pub fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.comp += (self.sum - t) + x;
        } else {
            self.comp += (x - t) + self.sum;
        }
        self.sum = t;
    }

    pub fn value(&self) -> f64 {
        self.sum + self.comp
    }
}

/// Per-component running moments of one block.
#[derive(Clone, Debug)]
struct Moments {
    n: f64,
    mean: Vec<f64>,
    m2: Vec<f64>,
}

impl Moments {
    fn from_values(rows: &[Vec<f64>], width: usize) -> Moments {
        let n = rows.len() as f64;
        let mut mean = vec![0.0; width];
        let mut m2 = vec![0.0; width];
        if rows.is_empty() {
            return Moments { n: 0.0, mean, m2 };
        }
        for (c, m) in mean.iter_mut().enumerate() {
            let mut s = KahanSum::default();
            for r in rows {
                s.add(r[c]);
            }
            *m = s.value() / n;
        }
        for (c, v) in m2.iter_mut().enumerate() {
            let mut s = KahanSum::default();
            for r in rows {
                let d = r[c] - mean[c];
                s.add(d * d);
            }
            *v = s.value();
        }
        Moments { n, mean, m2 }
    }

    fn merge(&mut self, other: &Moments) {
        if other.n == 0.0 {
            return;
        }
        let n = self.n + other.n;
        for c in 0..self.mean.len() {
            let delta = other.mean[c] - self.mean[c];
            self.mean[c] += delta * other.n / n;
            self.m2[c] += other.m2[c] + delta * delta * self.n * other.n / n;
        }
        self.n = n;
    }
}

/// Worker count requested through [`THREADS_ENV`], if any.
pub fn configured_threads() -> Option<usize> {
    std::env::var(THREADS_ENV).ok().and_then(|v| v.trim().parse::<usize>().ok()).filter(|n| *n >= 1)
}

/// Install the global worker pool sized by [`THREADS_ENV`]; later calls are no-ops.
pub fn init_thread_pool() {
    let mut b = rayon::ThreadPoolBuilder::new();
    if let Some(n) = configured_threads() {
        b = b.num_threads(n);
    }
    let _ = b.build_global();
}

/// One quadrature or enumeration node: coordinates per distribution and a weight.
type Node = (Vec<Vec<f64>>, f64);

/// Gauss–Hermite nodes and weights for the standard normal law.
pub fn gauss_hermite(n: usize) -> (Vec<f64>, Vec<f64>) {
    golub_welsch(n, |k| (k as f64).sqrt(), 1.0)
}

/// Gauss–Legendre nodes and weights for the uniform law on [−1, 1].
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    let offdiag = |k: usize| {
        let k = k as f64;
        k / (4.0 * k * k - 1.0).sqrt()
    };
    golub_welsch(n, offdiag, 2.0)
}

fn golub_welsch(n: usize, offdiag: impl Fn(usize) -> f64, mass: f64) -> (Vec<f64>, Vec<f64>) {
    let mut j = DMatrix::<f64>::zeros(n, n);
    for k in 1..n {
        let b = offdiag(k);
        j[(k - 1, k)] = b;
        j[(k, k - 1)] = b;
    }
    let eig = SymmetricEigen::new(j);
    let mut pairs: Vec<(f64, f64)> = (0..n)
        .map(|i| (eig.eigenvalues[i], mass * eig.eigenvectors[(0, i)].powi(2)))
        .collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    pairs.into_iter().unzip()
}

fn dist_nodes(d: &Dist, sampling: Sampling) -> Result<Vec<(Vec<f64>, f64)>> {
    match (d, sampling) {
        (Dist::Finite { atoms, probs }, _) => {
            Ok(atoms.iter().cloned().zip(probs.iter().copied()).filter(|(_, p)| *p > 0.0).collect())
        }
        (Dist::Gaussian(g), Sampling::Quadrature(k)) => {
            let (x, w) = gauss_hermite(k);
            let dim = g.mean.len();
            let mut out = Vec::new();
            for idx in 0..k.pow(dim as u32) {
                let mut z = Vec::with_capacity(dim);
                let mut wt = 1.0;
                let mut r = idx;
                for _ in 0..dim {
                    z.push(x[r % k]);
                    wt *= w[r % k];
                    r /= k;
                }
                out.push((g.transform(&z), wt));
            }
            Ok(out)
        }
        (Dist::Uniform { lo, hi }, Sampling::Quadrature(k)) => {
            let (x, w) = gauss_legendre(k);
            let dim = lo.len();
            let mut out = Vec::new();
            for idx in 0..k.pow(dim as u32) {
                let mut z = Vec::with_capacity(dim);
                let mut wt = 1.0;
                let mut r = idx;
                for c in 0..dim {
                    z.push(lo[c] + (hi[c] - lo[c]) * 0.5 * (x[r % k] + 1.0));
                    wt *= 0.5 * w[r % k];
                    r /= k;
                }
                out.push((z, wt));
            }
            Ok(out)
        }
        _ => config("exact enumeration requires finite-support primitives; use Monte Carlo or quadrature"),
    }
}

/// Tensor grid of nodes over the product law.
pub fn grid(dists: &[Dist], sampling: Sampling) -> Result<Vec<Node>> {
    let per: Vec<Vec<(Vec<f64>, f64)>> =
        dists.iter().map(|d| dist_nodes(d, sampling)).collect::<Result<_>>()?;
    let total = per.iter().try_fold(1usize, |acc, p| acc.checked_mul(p.len())).unwrap_or(usize::MAX);
    if total > MAX_GRID {
        return config(format!("integration grid of {total} nodes exceeds the cap of {MAX_GRID}"));
    }
    let mut out = Vec::with_capacity(total);
    for idx in 0..total {
        let mut r = idx;
        let mut pt = Vec::with_capacity(per.len());
        let mut w = 1.0;
        for p in &per {
            let (x, pw) = &p[r % p.len()];
            pt.push(x.clone());
            w *= pw;
            r /= p.len();
        }
        out.push((pt, w));
    }
    Ok(out)
}

/// Integrate a vector-valued function of one point of the product law.
///
/// `f` receives the point and an auxiliary generator for extra randomness
/// (test perturbations and the like) that is itself tied to the block.
pub fn integrate<F>(dists: &[Dist], plan: &MonteCarloPlan, stream: u64, width: usize, f: F) -> Result<Vec<Estimate>>
where
    F: Fn(&[Vec<f64>], &mut Rng) -> Result<Vec<f64>> + Sync,
{
    plan.validate()?;
    match plan.sampling {
        Sampling::MonteCarlo => integrate_mc(dists, plan, stream, width, &f),
        s => integrate_grid(dists, plan, s, stream, width, &f),
    }
}

fn check_row(row: Vec<f64>, width: usize, index: usize) -> Result<Vec<f64>> {
    if row.len() != width {
        return config(format!("integrand returned {} values, expected {width}", row.len()));
    }
    if row.iter().any(|v| !v.is_finite()) {
        return Err(crate::error::TeamError::NonFinite { sample: index });
    }
    Ok(row)
}

fn integrate_mc<F>(dists: &[Dist], plan: &MonteCarloPlan, stream: u64, width: usize, f: &F) -> Result<Vec<Estimate>>
where
    F: Fn(&[Vec<f64>], &mut Rng) -> Result<Vec<f64>> + Sync,
{
    let n = plan.samples;
    let blocks = n.div_ceil(BLOCK);
    let parts: Vec<Result<Moments>> = (0..blocks)
        .into_par_iter()
        .map(|b| {
            let mut rng = substream(plan.seed, stream, b as u64);
            let count = BLOCK.min(n - b * BLOCK);
            let mut rows = Vec::with_capacity(count);
            for k in 0..count {
                let pt: Vec<Vec<f64>> = dists.iter().map(|d| d.sample(&mut rng)).collect();
                rows.push(check_row(f(&pt, &mut rng)?, width, b * BLOCK + k)?);
            }
            Ok(Moments::from_values(&rows, width))
        })
        .collect();
    let mut total = Moments { n: 0.0, mean: vec![0.0; width], m2: vec![0.0; width] };
    for p in parts {
        total.merge(&p?);
    }
    Ok((0..width)
        .map(|c| {
            let var = if total.n > 1.0 { total.m2[c] / (total.n - 1.0) } else { 0.0 };
            Estimate { mean: total.mean[c], std_error: (var / total.n).sqrt(), n }
        })
        .collect())
}

fn integrate_grid<F>(
    dists: &[Dist],
    plan: &MonteCarloPlan,
    sampling: Sampling,
    stream: u64,
    width: usize,
    f: &F,
) -> Result<Vec<Estimate>>
where
    F: Fn(&[Vec<f64>], &mut Rng) -> Result<Vec<f64>> + Sync,
{
    let nodes = grid(dists, sampling)?;
    let total = nodes.len();
    let parts: Vec<Result<Vec<KahanSum>>> = nodes
        .par_chunks(BLOCK)
        .enumerate()
        .map(|(b, chunk)| {
            let mut rng = substream(plan.seed, stream, b as u64);
            let mut acc = vec![KahanSum::default(); width];
            for (k, (pt, w)) in chunk.iter().enumerate() {
                let row = check_row(f(pt, &mut rng)?, width, b * BLOCK + k)?;
                for (a, v) in acc.iter_mut().zip(row) {
                    a.add(w * v);
                }
            }
            Ok(acc)
        })
        .collect();
    let mut sums = vec![KahanSum::default(); width];
    for p in parts {
        for (s, a) in sums.iter_mut().zip(p?) {
            s.add(a.value());
        }
    }
    Ok(sums.iter().map(|s| Estimate { mean: s.value(), std_error: 0.0, n: total }).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream_id;

    #[test]
    fn hermite_moments() {
        let (x, w) = gauss_hermite(10);
        let m = |p: i32| x.iter().zip(&w).map(|(a, b)| a.powi(p) * b).sum::<f64>();
        assert!((m(0) - 1.0).abs() < 1e-13);
        assert!(m(1).abs() < 1e-13);
        assert!((m(2) - 1.0).abs() < 1e-12);
        assert!((m(4) - 3.0).abs() < 1e-11);
        assert!((m(6) - 15.0).abs() < 1e-10);
    }

    #[test]
    fn legendre_moments() {
        let (x, w) = gauss_legendre(5);
        let m = |p: i32| x.iter().zip(&w).map(|(a, b)| a.powi(p) * b).sum::<f64>();
        assert!((m(0) - 2.0).abs() < 1e-13);
        assert!((m(2) - 2.0 / 3.0).abs() < 1e-13);
        assert!((m(8) - 2.0 / 9.0).abs() < 1e-13);
    }

    #[test]
    fn exact_enumeration_of_finite_law() {
        let d = vec![Dist::finite_scalar(&[0.0, 1.0, 2.0], &[0.2, 0.5, 0.3])];
        let est = integrate(&d, &MonteCarloPlan::exact(), 0, 2, |p, _| Ok(vec![p[0][0], p[0][0] * p[0][0]])).unwrap();
        assert!((est[0].mean - 1.1).abs() < 1e-15);
        assert!((est[1].mean - 1.7).abs() < 1e-15);
        assert_eq!(est[0].std_error, 0.0);
    }

    #[test]
    fn quadrature_of_correlated_gaussian() {
        let d = vec![Dist::gaussian(vec![1.0, -1.0], vec![vec![2.0, 0.5], vec![0.5, 1.0]])];
        let est =
            integrate(&d, &MonteCarloPlan::quadrature(6), 0, 1, |p, _| Ok(vec![p[0][0] * p[0][1]])).unwrap();
        assert!((est[0].mean - (0.5 - 1.0)).abs() < 1e-12);
    }

    #[test]
    fn monte_carlo_mean_within_three_se() {
        let d = vec![Dist::normal(2.0, 1.0)];
        let est = integrate(&d, &MonteCarloPlan::monte_carlo(50_000, 9), stream_id("t"), 1, |p, _| Ok(vec![p[0][0]]))
            .unwrap();
        assert!((est[0].mean - 2.0).abs() < 3.0 * est[0].std_error + 1e-3);
        assert!(est[0].std_error > 0.0 && est[0].std_error < 0.01);
    }

    #[test]
    fn thread_count_does_not_change_results() {
        let d = vec![Dist::normal(0.0, 1.0), Dist::uniform(vec![0.0], vec![1.0])];
        let plan = MonteCarloPlan::monte_carlo(20_000, 3);
        let run = |threads: usize| {
            rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .unwrap()
                .install(|| integrate(&d, &plan, 5, 2, |p, _| Ok(vec![p[0][0] * p[1][0], p[1][0]])).unwrap())
        };
        let a = run(1);
        let b = run(4);
        assert_eq!(a, b);
    }

    #[test]
    fn zero_samples_rejected() {
        let d = vec![Dist::std_normal()];
        let plan = MonteCarloPlan::monte_carlo(0, 1);
        assert!(integrate(&d, &plan, 0, 1, |_, _| Ok(vec![0.0])).is_err());
    }

    #[test]
    fn kahan_recovers_small_terms() {
        let mut s = KahanSum::default();
        s.add(1e16);
        for _ in 0..1000 {
            s.add(1.0);
        }
        s.add(-1e16);
        assert_eq!(s.value(), 1000.0);
    }
}
