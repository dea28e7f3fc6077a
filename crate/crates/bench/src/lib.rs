//! Shared fixtures for the criterion benchmarks.

use teamred::reduction_independent::ReducedProblem;
use teamred::scenarios::{example1_problem, example2_problem, finite_toy_problem, lqg_vector};
use teamred::{lqg::LqgTeam, MonteCarloPlan, TeamProblem};

/// Sample count of the Monte Carlo benchmarks.
pub const SAMPLES: usize = 10_000;

pub fn mc_plan() -> MonteCarloPlan {
    MonteCarloPlan::monte_carlo(SAMPLES, 42)
}

pub fn example1_pair() -> (TeamProblem, ReducedProblem) {
    let (p, _, refs) = example1_problem(0.5);
    let reduced = ReducedProblem::new(p.clone(), refs).expect("example1 refs are valid");
    (p, reduced)
}

pub fn example2_dynamic() -> TeamProblem {
    example2_problem(0.5, 2.0, false).0
}

pub fn toy_pair() -> (TeamProblem, ReducedProblem) {
    let (p, refs) = finite_toy_problem();
    let reduced = ReducedProblem::new(p.clone(), refs).expect("toy refs are valid");
    (p, reduced)
}

pub fn lqg_team() -> LqgTeam {
    lqg_vector(1.0)
}
