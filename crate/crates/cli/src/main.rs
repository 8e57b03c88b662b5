mod commands;
mod config;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rnbounds::bounds::TrustRule;
use rnbounds::estimators::CdfKind;
use rnbounds::inference::DeltaMode;
use rnbounds::sim::{GridSpec, SimParams, StudyConfig};
use rnbounds::{Error, Result};
use serde_json::json;

use config::{parse_grid, DataSource, RunConfig};

#[derive(Parser, Debug)]
#[command(name = "rnbounds", version, about = "Bounds on counterfactual distributions and quantile treatment effects")]
#[command(arg_required_else_help = true)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Pointwise bounds on the counterfactual CDF.
    Bounds(DataArgs),
    /// Quantile treatment effect bounds.
    Qte(QteArgs),
    /// Monte Carlo study on the simulation design.
    Simulate(SimulateArgs),
    /// Numerical-delta confidence intervals for the bounds.
    Inference(InferenceArgs),
    /// Slater, recession-margin and active-set diagnostics.
    Check(DataArgs),
    /// Validate a dataset and write it back out in canonical form.
    DatasetDump(DataArgs),
}

#[derive(Args, Debug, Clone)]
struct CommonArgs {
    /// JSON or TOML run configuration; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, short)]
    out: Option<PathBuf>,
    /// Worker threads (defaults to all cores).
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Args, Debug, Clone)]
struct DataArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Input CSV file.
    #[arg(long, conflicts_with_all = ["sim_n", "sim_l"])]
    input: Option<PathBuf>,
    /// Draw the data from the simulation design with this many observations.
    #[arg(long)]
    sim_n: Option<usize>,
    /// Number of instrument values in the simulation design.
    #[arg(long)]
    sim_l: Option<usize>,
    #[arg(long)]
    y_col: Option<String>,
    #[arg(long)]
    d_col: Option<String>,
    #[arg(long)]
    z_col: Option<String>,
    #[arg(long, value_delimiter = ',')]
    x_cols: Option<Vec<String>>,
    /// Covariate value to condition on.
    #[arg(long, value_delimiter = ',', allow_negative_numbers = true)]
    x: Option<Vec<f64>>,
    /// Position of the reference instrument value in the sorted support.
    #[arg(long)]
    reference: Option<usize>,
    /// Evaluation grid `LO,HI,POINTS`.
    #[arg(long, value_parser = parse_grid, allow_hyphen_values = true)]
    grid: Option<GridSpec>,
    /// Bound on the squared norm of the coefficients (`inf` disables it).
    #[arg(long)]
    tau: Option<f64>,
    /// Use the smoothed CDF estimator.
    #[arg(long)]
    smoothed: bool,
    /// Outcome smoothing bandwidth (implies --smoothed).
    #[arg(long)]
    outcome_bandwidth: Option<f64>,
    #[arg(long)]
    grid_cap: Option<usize>,
    /// Trust points with recession margin at least this value.
    #[arg(long, conflicts_with = "trust_interval")]
    trust_margin: Option<f64>,
    /// Trust points inside `LO,HI`.
    #[arg(long, value_delimiter = ',', num_args = 1, allow_negative_numbers = true)]
    trust_interval: Option<Vec<f64>>,
    /// Replace untrusted points by the restricted-solution surrogate.
    #[arg(long)]
    fallback: bool,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug, Clone)]
struct QteArgs {
    #[command(flatten)]
    data: DataArgs,
    /// Quantile levels.
    #[arg(long, value_delimiter = ',')]
    quantiles: Option<Vec<f64>>,
}

#[derive(ValueEnum, Debug, Clone, Copy)]
enum ModeArg {
    Derivative,
    Resolve,
}

#[derive(Args, Debug, Clone)]
struct InferenceArgs {
    #[command(flatten)]
    data: DataArgs,
    /// Bootstrap draws.
    #[arg(long)]
    draws: Option<usize>,
    #[arg(long)]
    level: Option<f64>,
    #[arg(long)]
    kappa: Option<f64>,
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,
    /// Step for the re-solve mode.
    #[arg(long)]
    step: Option<f64>,
}

#[derive(ValueEnum, Debug, Clone, Copy)]
enum Profile {
    Smoke,
    Study,
}

#[derive(Args, Debug, Clone)]
struct SimulateArgs {
    #[command(flatten)]
    common: CommonArgs,
    #[arg(long, required = true)]
    seed: u64,
    #[arg(long, value_enum)]
    profile: Option<Profile>,
    /// Write the three figure families, one panel file per L.
    #[arg(long)]
    figure_mode: bool,
    #[arg(long)]
    replications: Option<usize>,
    #[arg(long, value_delimiter = ',')]
    n_list: Option<Vec<usize>>,
    #[arg(long, value_delimiter = ',')]
    l_list: Option<Vec<usize>>,
    /// Sample size of the single large draw per L.
    #[arg(long)]
    n_large: Option<usize>,
    #[arg(long, value_parser = parse_grid, allow_hyphen_values = true)]
    grid: Option<GridSpec>,
    #[arg(long)]
    tau: Option<f64>,
}

fn base_config(name: &str, common: &CommonArgs) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    cfg.command = name.to_string();
    if let Some(o) = &common.out {
        cfg.output = o.clone();
    }
    if common.threads.is_some() {
        cfg.threads = common.threads;
    }
    Ok(cfg)
}

fn data_config(name: &str, a: &DataArgs) -> Result<RunConfig> {
    let mut cfg = base_config(name, &a.common)?;
    if let Some(p) = &a.input {
        cfg.data = Some(DataSource::Csv { path: p.clone() });
    }
    if a.sim_n.is_some() || a.sim_l.is_some() {
        let mut params = match &cfg.data {
            Some(DataSource::Simulated { params }) => params.clone(),
            _ => SimParams::default(),
        };
        params.n = a.sim_n.unwrap_or(params.n);
        params.l = a.sim_l.unwrap_or(params.l);
        cfg.data = Some(DataSource::Simulated { params });
    }
    if let Some(c) = &a.y_col {
        cfg.columns.y = c.clone();
    }
    if let Some(c) = &a.d_col {
        cfg.columns.d = c.clone();
    }
    if let Some(c) = &a.z_col {
        cfg.columns.z = c.clone();
    }
    if let Some(c) = &a.x_cols {
        cfg.columns.x = c.clone();
    }
    if a.x.is_some() {
        cfg.x = a.x.clone();
    }
    if a.reference.is_some() {
        cfg.reference = a.reference;
    }
    if a.grid.is_some() {
        cfg.y0_grid = a.grid;
    }
    if let Some(t) = a.tau {
        cfg.bounds.tau = t;
    }
    if a.smoothed || a.outcome_bandwidth.is_some() {
        cfg.bounds.kind = CdfKind::Smoothed;
    }
    if let Some(c) = a.grid_cap {
        cfg.bounds.grid_cap = c;
    }
    if let Some(m) = a.trust_margin {
        cfg.bounds.trust = TrustRule::Margin { min: m };
    }
    if let Some(iv) = &a.trust_interval {
        if iv.len() != 2 {
            return Err(Error::InvalidParameter("--trust-interval takes LO,HI".into()));
        }
        cfg.bounds.trust = TrustRule::Interval { lo: iv[0], hi: iv[1] };
    }
    if a.fallback {
        cfg.bounds.fallback = true;
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn simulate_config(a: &SimulateArgs) -> Result<RunConfig> {
    let mut cfg = base_config("simulate", &a.common)?;
    cfg.seed = a.seed;
    let mut study = match (a.profile, cfg.study.take()) {
        (Some(Profile::Smoke), _) => StudyConfig::smoke(),
        (Some(Profile::Study), _) | (None, None) => StudyConfig::default(),
        (None, Some(s)) => s,
    };
    if let Some(r) = a.replications {
        study.r = r;
    }
    if let Some(n) = &a.n_list {
        study.n_list = n.clone();
    }
    if let Some(l) = &a.l_list {
        study.l_list = l.clone();
    }
    if let Some(n) = a.n_large {
        study.n_large = n;
    }
    if let Some(g) = a.grid {
        study.y0_grid = g;
    }
    if let Some(t) = a.tau {
        study.bounds.tau = t;
    }
    if !(study.bounds.tau > 0.0) {
        return Err(Error::InvalidParameter(format!("tau must be positive, got {}", study.bounds.tau)));
    }
    cfg.study = Some(study);
    cfg.figure_mode |= a.figure_mode;
    cfg.validate()?;
    Ok(cfg)
}

fn inference_config(a: &InferenceArgs) -> Result<RunConfig> {
    let mut cfg = data_config("inference", &a.data)?;
    let mut opts = cfg.inference.take().unwrap_or_default();
    if let Some(d) = a.draws {
        opts.draws = d;
    }
    if let Some(l) = a.level {
        opts.level = l;
    }
    if let Some(k) = a.kappa {
        opts.kappa = k;
    }
    if let Some(m) = a.mode {
        opts.mode = match m {
            ModeArg::Derivative => DeltaMode::Derivative,
            ModeArg::Resolve => DeltaMode::Resolve,
        };
    }
    if a.step.is_some() {
        opts.step = a.step;
    }
    opts.validate()?;
    cfg.inference = Some(opts);
    Ok(cfg)
}

fn set_threads(cfg: &RunConfig) -> Result<()> {
    if let Some(n) = cfg.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::InvalidParameter(format!("thread pool: {e}")))?;
    }
    Ok(())
}

fn run(cmd: &Command) -> Result<commands::Outcome> {
    let outcome_bandwidth = |a: &DataArgs| a.outcome_bandwidth;
    let (mut cfg, bw) = match cmd {
        Command::Bounds(a) => (data_config("bounds", a)?, outcome_bandwidth(a)),
        Command::Qte(a) => {
            let mut cfg = data_config("qte", &a.data)?;
            if a.quantiles.is_some() {
                cfg.quantiles = a.quantiles.clone();
            }
            (cfg, outcome_bandwidth(&a.data))
        }
        Command::Simulate(a) => (simulate_config(a)?, None),
        Command::Inference(a) => (inference_config(a)?, outcome_bandwidth(&a.data)),
        Command::Check(a) => (data_config("check", a)?, outcome_bandwidth(a)),
        Command::DatasetDump(a) => (data_config("dataset-dump", a)?, None),
    };
    set_threads(&cfg)?;
    match cmd {
        Command::Bounds(_) => commands::bounds(&mut cfg, bw),
        Command::Qte(_) => commands::qte(&mut cfg, bw),
        Command::Simulate(_) => commands::simulate(&mut cfg),
        Command::Inference(_) => commands::inference(&mut cfg, bw),
        Command::Check(_) => commands::check(&mut cfg, bw),
        Command::DatasetDump(_) => commands::dataset_dump(&mut cfg),
    }
}

fn command_name(cmd: &Command) -> &'static str {
    match cmd {
        Command::Bounds(_) => "bounds",
        Command::Qte(_) => "qte",
        Command::Simulate(_) => "simulate",
        Command::Inference(_) => "inference",
        Command::Check(_) => "check",
        Command::DatasetDump(_) => "dataset-dump",
    }
}

fn error_kind(e: &Error) -> &'static str {
    match e {
        Error::Io(_) => "io",
        Error::Csv(_) | Error::MissingColumn(_) | Error::BadRow { .. } | Error::NonBinaryTreatment { .. } => "input",
        Error::Json(_) | Error::InvalidParameter(_) | Error::InvalidGrid(_) => "config",
        Error::InvalidDataset(_)
        | Error::TooFewInstrumentValues(_)
        | Error::EmptyCell { .. }
        | Error::SparseCell { .. }
        | Error::EmptyInstrumentCell(_)
        | Error::ZeroKernelWeight(_)
        | Error::DimensionMismatch(_) => "data",
        _ => "solver",
    }
}

/// Data row (1-based, header excluded) the error refers to, when known.
fn error_row(e: &Error) -> Option<u64> {
    match e {
        Error::BadRow { row, .. } | Error::NonBinaryTreatment { row, .. } => Some(*row as u64),
        Error::Csv(c) => c.position().map(|p| p.record()),
        _ => None,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = e.print();
                return ExitCode::SUCCESS;
            }
            let v = json!({ "level": "error", "command": null, "kind": "usage", "message": e.to_string().trim_end() });
            eprintln!("{v}");
            return ExitCode::from(1);
        }
    };
    let name = command_name(&cli.command);
    match run(&cli.command) {
        Ok(outcome) => {
            for v in outcome.notes.iter().chain(&outcome.failures) {
                let mut v = v.clone();
                v["command"] = json!(name);
                eprintln!("{v}");
            }
            if outcome.failures.is_empty() {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(2)
            }
        }
        Err(e) => {
            let mut v = json!({ "level": "error", "command": name, "kind": error_kind(&e), "message": e.to_string() });
            if let Some(row) = error_row(&e) {
                v["row"] = json!(row);
            }
            eprintln!("{v}");
            ExitCode::from(1)
        }
    }
}
