use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use misreport::data::{load_dataset, AgentId, ColumnSchema, Role};
use misreport::estimators::{Estimand, EstimatorKind, DEFAULT_MIN_ABS_DELTA};
use misreport::learners::{LearnerKind, LearnerSpec};
use misreport::runner::{self, EstimationOptions, EstimatorCovariates, SweepSpec};
use misreport::simgen::{self, CovariateRoles, CovariateSource, Scenario, SimulationSpec};
use misreport::uncertainty::{BootstrapConfig, BootstrapMode};
use serde_json::json;

#[derive(Parser)]
#[command(
    name = "misreport",
    version,
    about = "Estimate misreporting rates of strategic agents"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Estimate misreporting rates from a manipulated and an unmanipulated CSV.
    Estimate(EstimateArgs),
    /// Draw a manipulated/unmanipulated pair from one of the built-in scenarios.
    Simulate(SimulateArgs),
    /// Run a replicated parameter sweep described by a JSON config.
    Sweep(SweepArgs),
}

#[derive(Args)]
struct EstimateArgs {
    #[arg(long)]
    manipulated: PathBuf,
    #[arg(long)]
    unmanipulated: PathBuf,
    /// Agent id, or `all`.
    #[arg(long, default_value = "all")]
    agent: String,
    /// cmre, nmre, ndee, ndee-noc, ndee-nos or ocsvm; repeat or comma-separate.
    #[arg(long, value_delimiter = ',', default_value = "cmre")]
    estimator: Vec<String>,
    /// mr, dim or fpr; repeat or comma-separate.
    #[arg(long, value_delimiter = ',', default_value = "mr")]
    estimand: Vec<String>,
    /// Bootstrap resamples for CMRE intervals (0 disables).
    #[arg(long, default_value_t = 0)]
    bootstrap: usize,
    #[arg(long, default_value_t = 0.95)]
    ci_level: f64,
    /// eval or refit.
    #[arg(long, default_value = "eval")]
    bootstrap_mode: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Clamp estimates and intervals to [0, 1].
    #[arg(long)]
    clip: bool,
    #[arg(long, default_value_t = DEFAULT_MIN_ABS_DELTA)]
    min_abs_delta: f64,
    /// gbt, logistic or mean.
    #[arg(long, default_value = "gbt")]
    learner: String,
    /// Column-role manifest (as written by `simulate`); needed for ndee-noc/ndee-nos.
    #[arg(long)]
    roles: Option<PathBuf>,
    #[arg(long)]
    col_x: Option<String>,
    #[arg(long)]
    col_y: Option<String>,
    #[arg(long)]
    col_agent: Option<String>,
    #[arg(long)]
    col_xstar: Option<String>,
    #[arg(long, value_delimiter = ',')]
    cols_c: Option<Vec<String>>,
    /// Also write per-agent rows (agent, estimator, estimand, value, ci_lower, ci_upper, variance, error).
    #[arg(long)]
    out_csv: Option<PathBuf>,
}

#[derive(Args)]
struct SimulateArgs {
    /// sim1 .. sim5
    #[arg(long, default_value = "sim1")]
    scenario: String,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    beta_a: Option<f64>,
    #[arg(long)]
    beta_m: Option<f64>,
    #[arg(long)]
    beta_xstar: Option<f64>,
    #[arg(long)]
    target_mr: Option<f64>,
    #[arg(long)]
    agent_intercept: Option<f64>,
    /// Per-agent target rates, e.g. `0,0,0.1,0.2,0.3`.
    #[arg(long, value_delimiter = ',')]
    agent_target_mrs: Option<Vec<f64>>,
    /// CSV of real covariates (columns c_a, c_e, c_s, c_m).
    #[arg(long)]
    covariates_csv: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long, default_value_t = 1)]
    jobs: usize,
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let code = match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            2
        }
    };
    std::process::exit(code);
}

fn run(cli: Cli) -> Result<i32> {
    match cli.command {
        Command::Estimate(a) => estimate(a),
        Command::Simulate(a) => simulate(a).map(|_| 0),
        Command::Sweep(a) => sweep(a).map(|_| 0),
    }
}

fn parse_scenario(s: &str) -> Result<Scenario> {
    serde_json::from_value(json!(s.to_ascii_lowercase()))
        .with_context(|| format!("unknown scenario `{s}` (expected sim1 .. sim5)"))
}

fn estimate(a: EstimateArgs) -> Result<i32> {
    let estimators: Vec<EstimatorKind> = a.estimator.iter().map(|s| s.parse()).collect::<Result<_, _>>()?;
    let estimands: Vec<Estimand> = a.estimand.iter().map(|s| s.parse()).collect::<Result<_, _>>()?;
    let kind = match a.learner.as_str() {
        "gbt" => LearnerKind::GradientBoostedTrees,
        "logistic" => LearnerKind::LogisticRegression,
        "mean" => LearnerKind::MeanOnly,
        other => bail!("unknown learner `{other}` (expected gbt, logistic or mean)"),
    };
    let bootstrap = if a.bootstrap > 0 {
        let cfg = BootstrapConfig {
            replicates: a.bootstrap,
            level: a.ci_level,
            mode: a.bootstrap_mode.parse::<BootstrapMode>()?,
            min_abs_delta: a.min_abs_delta,
        };
        cfg.validate()?;
        Some(cfg)
    } else {
        None
    };
    let options = EstimationOptions {
        learner: LearnerSpec {
            kind,
            ..Default::default()
        },
        min_abs_delta: a.min_abs_delta,
        bootstrap,
        estimands,
        clip: a.clip,
        ..Default::default()
    };

    let manipulated_schema = ColumnSchema {
        feature: a.col_x.clone(),
        outcome: a.col_y.clone(),
        covariates: a.cols_c.clone(),
        agent: a.col_agent.clone(),
        true_feature: None,
    };
    // In the reference file the true feature is the feature.
    let reference_schema = ColumnSchema {
        feature: a.col_xstar.clone(),
        outcome: a.col_y.clone(),
        covariates: a.cols_c.clone(),
        ..Default::default()
    };
    let d = load_dataset(&a.manipulated, &manipulated_schema, Role::Manipulated)?;
    let d_star = load_dataset(&a.unmanipulated, &reference_schema, Role::Unmanipulated)?;
    if !d.has_agents() {
        bail!("manipulated file has no agent column (use --col-agent)");
    }
    let agents = if a.agent == "all" {
        d.agent_set()
    } else {
        vec![AgentId::new(a.agent.clone())]
    };
    let covariates = match &a.roles {
        Some(path) => {
            let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            let roles: CovariateRoles = serde_json::from_str(&text)?;
            EstimatorCovariates::from(&roles)
        }
        None => EstimatorCovariates::default(),
    };

    let outcomes = runner::estimate_pair(&d, &d_star, &agents, &estimators, &covariates, &options, a.seed)?;
    if let Some(path) = &a.out_csv {
        runner::write_agent_estimates(&outcomes, path)?;
    }
    let stdout = io::stdout();
    let mut out = stdout.lock();
    let mut failed = 0;
    for o in outcomes {
        let line = match o.result {
            Ok(m) => serde_json::to_value(&m)?,
            Err(msg) => {
                failed += 1;
                log::warn!("{} {} for agent {}: {msg}", o.estimator, o.estimand.label(), o.agent);
                json!({
                    "estimand": o.estimand,
                    "estimator": o.estimator,
                    "agent": o.agent,
                    "error": msg,
                })
            }
        };
        writeln!(out, "{line}")?;
    }
    Ok(if failed > 0 { 1 } else { 0 })
}

fn simulate(a: SimulateArgs) -> Result<()> {
    let mut spec = SimulationSpec::new(parse_scenario(&a.scenario)?);
    macro_rules! set {
        ($($field:ident),*) => { $(if let Some(v) = a.$field { spec.$field = v; })* };
    }
    set!(
        n,
        beta_a,
        beta_m,
        beta_xstar,
        target_mr,
        agent_intercept,
        agent_target_mrs
    );
    if let Some(path) = a.covariates_csv {
        spec.covariates = CovariateSource::Csv { path };
    }
    spec.seed = a.seed;

    let pair = simgen::simulate(&spec)?;
    let dir = &a.out_dir;
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    pair.d.save_csv(dir.join("manipulated.csv"))?;
    pair.d_star.save_csv(dir.join("unmanipulated.csv"))?;
    write_json(&dir.join("roles.json"), &serde_json::to_value(&pair.roles)?)?;
    let meta = json!({
        "spec": spec,
        "realized_mr": pair.realized_mr,
        "realized_mr_by_agent": pair.realized_mr_by_agent,
        "mu_used": pair.mu_used,
        "n_manipulated": pair.d.n(),
        "n_unmanipulated": pair.d_star.n(),
    });
    write_json(&dir.join("meta.json"), &meta)
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)?).with_context(|| format!("writing {}", path.display()))
}

fn sweep(a: SweepArgs) -> Result<()> {
    let text = fs::read_to_string(&a.config).with_context(|| format!("reading {}", a.config.display()))?;
    let spec = SweepSpec::from_json(&text)?;
    let result = runner::run_sweep(&spec, a.jobs)?;
    runner::write_sweep_outputs(&spec, &result, &a.out_dir)?;
    let degenerate = result.aggregate.iter().filter(|r| r.n_ok == 0).count();
    if degenerate > 0 {
        log::warn!("{degenerate} aggregate cells had no successful replication");
    }
    Ok(())
}
