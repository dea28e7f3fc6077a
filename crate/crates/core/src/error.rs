use thiserror::Error;

/// Errors raised while building, simulating or checking a team problem.
///
/// DM indices are stored 0-based and displayed 1-based.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum TeamError {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("domain error at DM {}: action {:?} outside the action space", .dm + 1, .value)]
    Domain { dm: usize, value: Vec<f64> },

    #[error("invariant violated at DM {}: {}", .dm + 1, .what)]
    Invariant { dm: usize, what: String },

    #[error("weight overflow at DM {}: log-weight {:.3e} exceeds the cap; pick a reference measure closer to the channel law", .dm + 1, .log_weight)]
    WeightOverflow { dm: usize, log_weight: f64 },

    #[error("non-finite cost at sample {sample}")]
    NonFinite { sample: usize },

    #[error("parameter error: {0}")]
    Parameter(String),

    #[error("unsupported form: {0}")]
    UnsupportedForm(String),

    #[error("singular linear system: {0}")]
    Singular(String),

    #[error("dependency cycle while transporting the policy of DM {}", .0 + 1)]
    Cycle(usize),
}

pub type Result<T> = std::result::Result<T, TeamError>;

pub(crate) fn config<T>(msg: impl Into<String>) -> Result<T> {
    Err(TeamError::Config(msg.into()))
}
