//! Static reductions of sequential stochastic teams and numerical checks of
//! stationarity, person-by-person optimality and global optimality in each
//! problem form.

pub mod error;
pub mod lqg;
pub mod model_core;
pub mod montecarlo;
pub mod multistage;
pub mod optimality;
pub mod reduction_dependent;
pub mod reduction_independent;
pub mod report;
pub mod rng;
pub mod scenarios;

pub use error::{Result, TeamError};
pub use model_core::{
    classify_information_structure, simulate_path, validate_problem, ActionSpace, CostFunction, Dist,
    InformationStructure, IsClass, MeasurementMap, Outcome, Override, Path, PathModel, Policy, PolicyRep,
    PrimitiveSample, PrimitiveSpace, Signal, TeamProblem,
};
pub use montecarlo::{Estimate, MonteCarloPlan, Sampling};
