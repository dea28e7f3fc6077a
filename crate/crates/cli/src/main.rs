use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use teamred::lqg::LqgConfig;
use teamred::montecarlo::init_thread_pool;
use teamred::report::{describe_scenario, parse_policy, residual_rows, Report};
use teamred::scenarios::{self, CheckOutcome};
use teamred::{MonteCarloPlan, TeamError};

/// Static reductions and optimality checks for sequential stochastic teams.
#[derive(Parser, Debug)]
#[command(name = "teamred", version)]
struct Cli {
    /// Print one line per check to stderr.
    #[arg(short, long, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct PlanArgs {
    /// Monte Carlo sample count.
    #[arg(long, default_value_t = 20_000)]
    samples: usize,
    #[arg(long, default_value_t = 42)]
    seed: u64,
}

impl PlanArgs {
    fn plan(&self) -> MonteCarloPlan {
        MonteCarloPlan::monte_carlo(self.samples, self.seed)
    }
}

#[derive(Args, Debug)]
struct OutArgs {
    /// Write the JSON report here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Write residual rows (check, dm, direction, residual, se) as CSV.
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// List built-in scenarios and their parameters.
    List {
        #[arg(long)]
        json: bool,
    },
    /// Run the checks of one or all scenarios against their expected verdicts.
    Verify {
        #[arg(long, conflicts_with = "all", required_unless_present = "all")]
        scenario: Option<String>,
        #[arg(long)]
        all: bool,
        /// Scenario parameter override, `name=value`; repeatable.
        #[arg(long = "param", value_parser = parse_param)]
        params: Vec<(String, f64)>,
        #[command(flatten)]
        plan: PlanArgs,
        #[command(flatten)]
        out: OutArgs,
    },
    /// Reduce a scenario to a static form and check cost preservation.
    Reduce {
        #[arg(long)]
        scenario: String,
        /// pi, pd (alias s), cs, dcs or d.
        #[arg(long)]
        form: String,
        /// Policy JSON (`{"policy": [...]}`) in the D form.
        #[arg(long)]
        policy: Option<PathBuf>,
        #[arg(long = "param", value_parser = parse_param)]
        params: Vec<(String, f64)>,
        #[command(flatten)]
        plan: PlanArgs,
        #[command(flatten)]
        out: OutArgs,
    },
    /// Solve a partially nested LQG team from a JSON config.
    Lqg {
        #[arg(long)]
        config: PathBuf,
        #[command(flatten)]
        plan: PlanArgs,
        #[command(flatten)]
        out: OutArgs,
    },
    /// Run one check on a multistage team (built-in name or linear-Gaussian JSON file).
    Multistage {
        #[arg(long)]
        config: String,
        #[arg(long, value_parser = scenarios::MS_CHECKS)]
        check: String,
        #[command(flatten)]
        plan: PlanArgs,
        #[command(flatten)]
        out: OutArgs,
    },
    /// Write a scenario bundle (problem, references, policies, expectations) as JSON.
    Export {
        #[arg(long)]
        scenario: String,
        #[arg(long = "param", value_parser = parse_param)]
        params: Vec<(String, f64)>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn parse_param(s: &str) -> Result<(String, f64), String> {
    let (k, v) = s.split_once('=').ok_or_else(|| format!("expected name=value, got '{s}'"))?;
    let v: f64 = v.trim().parse().map_err(|e| format!("parameter '{k}': {e}"))?;
    Ok((k.trim().to_string(), v))
}

fn read(path: &Path) -> Result<String, TeamError> {
    std::fs::read_to_string(path).map_err(|e| TeamError::Config(format!("cannot read {}: {e}", path.display())))
}

fn write(path: &Path, text: &str) -> Result<(), TeamError> {
    std::fs::write(path, text).map_err(|e| TeamError::Config(format!("cannot write {}: {e}", path.display())))
}

fn emit(mut report: Report, out: &OutArgs, verbose: bool) -> Result<bool, TeamError> {
    report.timestamp = chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Secs, true);
    if verbose {
        for c in &report.checks {
            eprintln!(
                "{:<14} {:<30} {:<13} expected {:<13} {}",
                c.scenario,
                c.id,
                verdict_name(c),
                serde_json::to_value(c.expected).unwrap().as_str().unwrap_or(""),
                if c.matched { "ok" } else { "MISMATCH" }
            );
        }
    }
    let text = report.to_json();
    match &out.out {
        Some(p) => write(p, &(text + "\n"))?,
        None => println!("{text}"),
    }
    if let Some(p) = &out.csv {
        let mut w = csv::Writer::from_path(p).map_err(|e| TeamError::Config(format!("cannot write {}: {e}", p.display())))?;
        let mut rows = vec![("check".to_string(), "dm".to_string(), "direction".to_string(), "residual".to_string(), "se".to_string())];
        rows.extend(residual_rows(&report.checks).into_iter().map(|(c, d, dir, r, s)| (c, d.to_string(), dir, format!("{r:e}"), format!("{s:e}"))));
        for r in rows {
            w.serialize(r).map_err(|e| TeamError::Config(format!("csv: {e}")))?;
        }
        w.flush().map_err(|e| TeamError::Config(format!("csv: {e}")))?;
    }
    let mismatched = report.checks.iter().filter(|c| !c.matched).count();
    eprintln!("{} checks, {} mismatched", report.checks.len(), mismatched);
    Ok(report.all_matched)
}

fn verdict_name(c: &CheckOutcome) -> String {
    serde_json::to_value(c.verdict).unwrap().as_str().unwrap_or("").to_string()
}

fn params_map(params: &[(String, f64)]) -> BTreeMap<String, f64> {
    params.iter().cloned().collect()
}

fn run(cli: Cli) -> Result<bool, TeamError> {
    let verbose = cli.verbose;
    match cli.command {
        Command::List { json } => {
            let cat = scenarios::catalogue();
            if json {
                println!("{}", serde_json::to_string_pretty(&cat).unwrap());
            } else {
                for s in cat {
                    println!("{:<13} {}", s.name, s.summary);
                    for p in s.params {
                        println!("{:<13}   --param {}={} (range {})", "", p.name, p.default, p.range);
                    }
                }
                println!("multistage configs: {}", scenarios::MS_BUILTINS.join(", "));
            }
            Ok(true)
        }
        Command::Verify { scenario, all, params, plan, out } => {
            let mc = plan.plan();
            mc.validate()?;
            let names: Vec<String> = if all {
                if !params.is_empty() {
                    return Err(TeamError::Config("--param applies to a single --scenario".into()));
                }
                scenarios::NAMES.iter().map(|s| s.to_string()).collect()
            } else {
                vec![scenario.expect("clap enforces --scenario or --all")]
            };
            let mut checks = Vec::new();
            let mut used = serde_json::Map::new();
            for name in &names {
                let sc = scenarios::build(name, &params_map(&params))?;
                if verbose {
                    eprintln!("running {name}");
                }
                let r = scenarios::run_scenario(&sc, &mc)?;
                used.insert(name.clone(), serde_json::json!(r.params));
                checks.extend(r.checks);
            }
            let label = if all { "all".to_string() } else { names[0].clone() };
            let mut report = Report::new("verify", plan.seed, plan.samples, &label, checks);
            report.extra = serde_json::json!({ "params": used });
            emit(report, &out, verbose)
        }
        Command::Reduce { scenario, form, policy, params, plan, out } => {
            let mc = plan.plan();
            mc.validate()?;
            let sc = scenarios::build(&scenario, &params_map(&params))?;
            let policy = match &policy {
                Some(p) => Some(parse_policy(&read(p)?)?),
                None => None,
            };
            let (check, extra) = scenarios::reduce_scenario(&sc, &form, policy, &mc)?;
            let mut report = Report::new("reduce", plan.seed, plan.samples, &scenario, vec![check]);
            report.extra = extra;
            emit(report, &out, verbose)
        }
        Command::Lqg { config, plan, out } => {
            let mc = plan.plan();
            mc.validate()?;
            let cfg: LqgConfig = serde_json::from_str(&read(&config)?).map_err(|e| TeamError::Config(format!("LQG config: {e}")))?;
            let team = cfg.to_team()?;
            let (checks, extra) = scenarios::lqg_pipeline(&team, &mc)?;
            let mut report = Report::new("lqg", plan.seed, plan.samples, &config.display().to_string(), checks);
            report.extra = extra;
            emit(report, &out, verbose)
        }
        Command::Multistage { config, check, plan, out } => {
            let mc = plan.plan();
            mc.validate()?;
            let source = if scenarios::MS_BUILTINS.contains(&config.as_str()) { config.clone() } else { read(Path::new(&config))? };
            let inst = scenarios::ms_instance(&source, &mc)?;
            let outcome = scenarios::ms_check(&inst, &check, &mc)?;
            let report = Report::new("multistage", plan.seed, plan.samples, &config, vec![outcome]);
            emit(report, &out, verbose)
        }
        Command::Export { scenario, params, out } => {
            let sc = scenarios::build(&scenario, &params_map(&params))?;
            let text = serde_json::to_string_pretty(&describe_scenario(&sc)).unwrap();
            match out {
                Some(p) => write(&p, &(text + "\n"))?,
                None => println!("{text}"),
            }
            Ok(true)
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    init_thread_pool();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
