//! JSON report schema, problem descriptions and the policy file format.

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::error::{config, Result};
use crate::model_core::{ActionSpace, Dist, Policy, PolicyRep, PrimitiveSpace, Signal, TeamProblem};
use crate::reduction_independent::{RefKind, ReferenceMeasure};
use crate::scenarios::{CheckOutcome, Scenario, ScenarioModel};

pub const SCHEMA_VERSION: u32 = 1;

/// Top-level report written by every CLI command.
#[derive(Clone, Debug, Serialize)]
pub struct Report {
    pub schema: u32,
    pub command: String,
    pub seed: u64,
    pub samples: usize,
    pub scenario: String,
    pub checks: Vec<CheckOutcome>,
    pub all_matched: bool,
    #[serde(skip_serializing_if = "Value::is_null")]
    pub extra: Value,
    pub timestamp: String,
}

impl Report {
    pub fn new(command: &str, seed: u64, samples: usize, scenario: &str, checks: Vec<CheckOutcome>) -> Self {
        let all_matched = checks.iter().all(|c| c.matched);
        Report {
            schema: SCHEMA_VERSION,
            command: command.into(),
            seed,
            samples,
            scenario: scenario.into(),
            checks,
            all_matched,
            extra: Value::Null,
            timestamp: String::new(),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// One CSV row per residual: (check, dm, direction, residual, se).
pub fn residual_rows(checks: &[CheckOutcome]) -> Vec<(String, usize, String, f64, f64)> {
    checks
        .iter()
        .flat_map(|c| {
            c.residuals.iter().flatten().map(move |r| (format!("{}/{}", c.scenario, c.id), r.dm, r.direction.clone(), r.residual, r.se))
        })
        .collect()
}

fn bound(x: f64) -> Value {
    if x.is_finite() {
        json!(x)
    } else {
        Value::Null
    }
}

pub fn describe_dist(d: &Dist) -> Value {
    match d {
        Dist::Gaussian(g) => json!({ "kind": "gaussian", "mean": g.mean, "cov": g.cov }),
        Dist::Uniform { lo, hi } => json!({ "kind": "uniform", "lo": lo, "hi": hi }),
        Dist::Finite { atoms, probs } => json!({ "kind": "finite", "atoms": atoms, "probs": probs }),
    }
}

fn describe_space(a: &ActionSpace) -> Value {
    json!({
        "lo": a.lo.iter().map(|x| bound(*x)).collect::<Vec<_>>(),
        "hi": a.hi.iter().map(|x| bound(*x)).collect::<Vec<_>>(),
    })
}

fn signal_names(sigs: &[Signal], space: &PrimitiveSpace) -> Vec<String> {
    sigs.iter().map(|s| s.name(space)).collect()
}

pub fn describe_problem(p: &TeamProblem) -> Value {
    let prims = &p.primitives;
    json!({
        "name": p.name,
        "N": p.measurements.len(),
        "primitives": prims.vars.iter().map(|v| json!({ "name": v.name, "dim": v.dist.dim(), "dist": describe_dist(&v.dist) })).collect::<Vec<_>>(),
        "measurements": p.measurements.iter().map(|m| json!({
            "dm": m.dm + 1,
            "reads": signal_names(&m.reads, prims),
            "dim": m.dim,
            "kind": m.label,
        })).collect::<Vec<_>>(),
        "info": { "I": p.info.sets.iter().map(|s| signal_names(s, prims)).collect::<Vec<_>>() },
        "cost": { "kind": p.cost.label },
        "action_spaces": p.action_spaces.iter().map(describe_space).collect::<Vec<_>>(),
    })
}

pub fn describe_refs(refs: &[ReferenceMeasure], space: &PrimitiveSpace) -> Value {
    json!({
        "refs": refs.iter().map(|r| {
            let (noise, reads) = match &r.kind {
                RefKind::Identity => (Value::Null, Vec::new()),
                RefKind::Channel { noise, reads, .. } => (json!(space.vars[*noise].name), signal_names(reads, space)),
            };
            json!({ "dm": r.dm + 1, "Q": describe_dist(&r.q), "f": r.label, "noise": noise, "reads": reads })
        }).collect::<Vec<_>>()
    })
}

/// Policy file entry.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyEntry {
    Affine { gain: Vec<Vec<f64>>, bias: Vec<f64> },
    Tabular { keys: Vec<Vec<f64>>, actions: Vec<Vec<f64>> },
    Closure(String),
}

/// `{"policy": [entry per DM]}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolicyFile {
    pub policy: Vec<PolicyEntry>,
}

pub fn policy_to_file(p: &Policy) -> PolicyFile {
    PolicyFile {
        policy: p
            .entries
            .iter()
            .map(|e| match e {
                PolicyRep::Affine { gain, bias } => PolicyEntry::Affine { gain: gain.clone(), bias: bias.clone() },
                PolicyRep::Tabular { keys, actions } => PolicyEntry::Tabular { keys: keys.clone(), actions: actions.clone() },
                PolicyRep::Closure { label, .. } => PolicyEntry::Closure(format!("closure: not serializable ({label})")),
            })
            .collect(),
    }
}

pub fn policy_json(p: &Policy) -> Value {
    serde_json::to_value(policy_to_file(p)).expect("policy serializes")
}

pub fn policy_from_file(f: &PolicyFile) -> Result<Policy> {
    let entries = f
        .policy
        .iter()
        .enumerate()
        .map(|(i, e)| match e {
            PolicyEntry::Affine { gain, bias } => {
                if gain.len() != bias.len() {
                    return config(format!("policy of DM {}: {} gain rows but {} bias entries", i + 1, gain.len(), bias.len()));
                }
                Ok(PolicyRep::Affine { gain: gain.clone(), bias: bias.clone() })
            }
            PolicyEntry::Tabular { keys, actions } => {
                if keys.len() != actions.len() {
                    return config(format!("policy of DM {}: {} keys but {} actions", i + 1, keys.len(), actions.len()));
                }
                Ok(PolicyRep::Tabular { keys: keys.clone(), actions: actions.clone() })
            }
            PolicyEntry::Closure(label) => config(format!("policy of DM {} is a closure ({label}); closures are registered in code only", i + 1)),
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Policy::new(entries))
}

pub fn parse_policy(text: &str) -> Result<Policy> {
    let f: PolicyFile = serde_json::from_str(text).map_err(|e| crate::TeamError::Config(format!("policy file: {e}")))?;
    policy_from_file(&f)
}

/// Scenario bundle as JSON: problem, reference measures, policies and expectations.
pub fn describe_scenario(sc: &Scenario) -> Value {
    let model = match &sc.model {
        ScenarioModel::Single { problem, refs, .. } => {
            let mut v = describe_problem(problem);
            if let Some(r) = refs {
                v["refs"] = describe_refs(r, &problem.primitives)["refs"].clone();
            }
            v
        }
        ScenarioModel::Lqg { instances } => json!(instances
            .iter()
            .map(|(label, t)| json!({ "label": label, "config": crate::lqg::LqgConfig::from_team(t) }))
            .collect::<Vec<_>>()),
        ScenarioModel::Multi { team, refs } => json!({
            "name": team.name,
            "horizon": team.horizon,
            "agents": team.agents,
            "primitives": team.primitives.vars.iter().map(|v| json!({ "name": v.name, "dist": describe_dist(&v.dist) })).collect::<Vec<_>>(),
            "info": team.info,
            "refs": describe_refs(refs, &team.primitives)["refs"].clone(),
        }),
    };
    json!({
        "scenario": sc.name,
        "params": sc.params,
        "model": model,
        "policies": sc.policies.iter().map(|(k, p)| (k.clone(), policy_json(p))).collect::<serde_json::Map<_, _>>(),
        "expected": sc.expected,
    })
}
