//! `drfusion`: simulate scenarios, fuse treatments, learn and evaluate
//! policies, and run the replication benchmark.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use drfusion::eval::Method;
use drfusion::fusion::PenaltyKind;
use drfusion::nuisance::OutcomeModel;
use drfusion::synth::ScenarioKind;
use drfusion::{Error, ErrorClass};

use crate::config::RunConfig;

#[derive(Parser, Debug)]
#[command(name = "drfusion", version, about = "Doubly robust treatment fusion and policy learning")]
struct Cli {
    /// TOML file with settings; flags override it.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Repeat for more log output.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset.
    Simulate(SimulateArgs),
    /// Calibrate arms and fuse treatments into groups.
    Fuse(FuseArgs),
    /// Learn a policy tree over treatment groups.
    Learn(LearnArgs),
    /// Score groupings and policies.
    Evaluate(EvaluateArgs),
    /// Run the Monte Carlo comparison of methods.
    Bench(BenchArgs),
}

#[derive(Args, Debug, Default)]
struct ScenarioArgs {
    /// Outcome model of the scenario.
    #[arg(long, value_parser = parse_kind)]
    kind: Option<ScenarioKind>,
    /// Number of treatments (a multiple of 4).
    #[arg(long)]
    k: Option<usize>,
    /// Total sample size.
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    noise_sd: Option<f64>,
}

#[derive(Args, Debug, Default)]
struct CalibrationArgs {
    /// Cressie-Read index of the calibration divergence.
    #[arg(long, allow_hyphen_values = true)]
    gamma: Option<f64>,
    /// Comma-separated covariates to balance.
    #[arg(long, value_delimiter = ',')]
    calib_cols: Option<Vec<String>>,
    /// Moment tolerance of the calibration solver.
    #[arg(long)]
    calib_tol: Option<f64>,
    /// Skip calibration and use uniform within-arm weights.
    #[arg(long)]
    no_weights: bool,
}

#[derive(Args, Debug, Default)]
struct FusionArgs {
    #[arg(long, value_parser = parse_penalty)]
    penalty: Option<PenaltyKind>,
    /// Distance below which fused coefficient rows share a group.
    #[arg(long)]
    threshold: Option<f64>,
    #[arg(long)]
    ebic_gamma: Option<f64>,
    /// Comma-separated penalty levels replacing the automatic grid.
    #[arg(long, value_delimiter = ',')]
    lambda_grid: Option<Vec<f64>>,
}

#[derive(Args, Debug, Default)]
struct PolicyArgs {
    /// Cross-fitting folds.
    #[arg(long)]
    folds: Option<usize>,
    #[arg(long, value_parser = parse_outcome_model)]
    outcome_model: Option<OutcomeModel>,
    /// Propensity bounds as `lo,hi`.
    #[arg(long, value_delimiter = ',', num_args = 1)]
    clip: Option<Vec<f64>>,
    /// Policy tree depth.
    #[arg(long)]
    depth: Option<usize>,
    /// Comma-separated covariates the tree may split on.
    #[arg(long, value_delimiter = ',')]
    policy_cols: Option<Vec<String>>,
    /// Cap on split candidates per covariate.
    #[arg(long)]
    max_splits: Option<usize>,
    /// Use every midpoint as a split candidate.
    #[arg(long)]
    exact_splits: bool,
}

#[derive(Args, Debug)]
struct SimulateArgs {
    #[command(flatten)]
    scenario: ScenarioArgs,
    #[arg(long)]
    seed: Option<u64>,
    /// Output CSV; metadata goes to `<out>.meta.json`.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct FuseArgs {
    /// Input CSV with columns `a`, `y` and covariates.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[command(flatten)]
    calibration: CalibrationArgs,
    #[command(flatten)]
    fusion: FusionArgs,
}

#[derive(Args, Debug)]
struct LearnArgs {
    #[arg(long)]
    data: Option<PathBuf>,
    /// Grouping CSV (`treatment,group`); each treatment is its own group when absent.
    #[arg(long)]
    groups: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[command(flatten)]
    policy: PolicyArgs,
}

#[derive(Args, Debug)]
struct EvaluateArgs {
    /// Grouping CSV to score against `--truth`.
    #[arg(long)]
    groups: Option<PathBuf>,
    /// Reference grouping: a grouping CSV or a simulated dataset's `.meta.json`.
    #[arg(long)]
    truth: Option<PathBuf>,
    /// Policy JSON written by `learn`.
    #[arg(long)]
    policy: Option<PathBuf>,
    /// Dataset on which to estimate the policy's value.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Also compute the policy's population value under the scenario.
    #[arg(long)]
    scenario_value: bool,
    #[command(flatten)]
    scenario: ScenarioArgs,
    #[arg(long)]
    seed: Option<u64>,
    /// Output JSON file (stdout when absent).
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    policy_args: PolicyArgs,
}

#[derive(Args, Debug)]
struct BenchArgs {
    #[command(flatten)]
    scenario: ScenarioArgs,
    #[arg(long)]
    reps: Option<usize>,
    #[arg(long)]
    base_seed: Option<u64>,
    /// Comma-separated subset of baseline, fusion, cw_fusion, linear_ma.
    #[arg(long, value_delimiter = ',', value_parser = parse_method)]
    methods: Option<Vec<Method>>,
    /// Population draws per value estimate.
    #[arg(long)]
    test_size: Option<usize>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    calibration: CalibrationArgs,
    #[command(flatten)]
    fusion: FusionArgs,
    #[command(flatten)]
    policy: PolicyArgs,
}

fn parse_kind(s: &str) -> Result<ScenarioKind, String> {
    match s {
        "nonlinear" => Ok(ScenarioKind::Nonlinear),
        "linear" => Ok(ScenarioKind::Linear),
        _ => Err(format!("unknown scenario kind `{s}` (expected nonlinear or linear)")),
    }
}

fn parse_penalty(s: &str) -> Result<PenaltyKind, String> {
    match s {
        "l1" => Ok(PenaltyKind::L1),
        "mcp" => Ok(PenaltyKind::Mcp),
        _ => Err(format!("unknown penalty `{s}` (expected l1 or mcp)")),
    }
}

fn parse_outcome_model(s: &str) -> Result<OutcomeModel, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_method(s: &str) -> Result<Method, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

impl ScenarioArgs {
    fn apply(&self, cfg: &mut RunConfig) {
        if let Some(v) = self.kind {
            cfg.scenario.kind = v;
        }
        if let Some(v) = self.k {
            cfg.scenario.k = v;
        }
        if let Some(v) = self.n {
            cfg.scenario.n = v;
        }
        if let Some(v) = self.noise_sd {
            cfg.scenario.noise_sd = v;
        }
    }
}

impl CalibrationArgs {
    fn apply(&self, cfg: &mut RunConfig) {
        if let Some(v) = self.gamma {
            cfg.calibration.gamma = v;
        }
        if let Some(v) = &self.calib_cols {
            cfg.calibration_columns = Some(v.clone());
        }
        if let Some(v) = self.calib_tol {
            cfg.calibration.tol = v;
        }
        if self.no_weights {
            cfg.no_weights = true;
        }
    }
}

impl FusionArgs {
    fn apply(&self, cfg: &mut RunConfig) {
        if let Some(v) = self.penalty {
            cfg.fusion.penalty = v;
        }
        if let Some(v) = self.threshold {
            cfg.fusion.threshold = v;
        }
        if let Some(v) = self.ebic_gamma {
            cfg.fusion.ebic_gamma = v;
        }
        if let Some(v) = &self.lambda_grid {
            cfg.fusion.lambda_grid = Some(v.clone());
        }
    }
}

impl PolicyArgs {
    fn apply(&self, cfg: &mut RunConfig) -> Result<(), Error> {
        if let Some(v) = self.folds {
            cfg.policy.nuisance.folds = v;
        }
        if let Some(v) = self.outcome_model {
            cfg.policy.nuisance.outcome_model = v;
        }
        if let Some(v) = &self.clip {
            match v.as_slice() {
                [lo, hi] => cfg.policy.nuisance.clip = (*lo, *hi),
                _ => return Err(Error::Invalid("--clip expects `lo,hi`".into())),
            }
        }
        if let Some(v) = self.depth {
            cfg.policy.depth = v;
        }
        if let Some(v) = &self.policy_cols {
            cfg.policy_columns = Some(v.clone());
        }
        if let Some(v) = self.max_splits {
            cfg.policy.max_splits = v;
        }
        if self.exact_splits {
            cfg.policy.exact_splits = true;
        }
        Ok(())
    }
}

fn set<T>(slot: &mut T, v: Option<T>) {
    if let Some(v) = v {
        *slot = v;
    }
}

fn set_opt<T>(slot: &mut Option<T>, v: Option<T>) {
    if v.is_some() {
        *slot = v;
    }
}

/// Defaults, then the config file, then flags.
fn effective_config(cli: &Cli) -> Result<RunConfig, Error> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    set_opt(&mut cfg.threads, cli.threads);
    match &cli.command {
        Command::Simulate(a) => {
            a.scenario.apply(&mut cfg);
            set(&mut cfg.seed, a.seed);
            set_opt(&mut cfg.out, a.out.clone());
        }
        Command::Fuse(a) => {
            set_opt(&mut cfg.data, a.data.clone());
            set_opt(&mut cfg.out, a.out.clone());
            set(&mut cfg.seed, a.seed);
            a.calibration.apply(&mut cfg);
            a.fusion.apply(&mut cfg);
        }
        Command::Learn(a) => {
            set_opt(&mut cfg.data, a.data.clone());
            set_opt(&mut cfg.groups, a.groups.clone());
            set_opt(&mut cfg.out, a.out.clone());
            set(&mut cfg.seed, a.seed);
            a.policy.apply(&mut cfg)?;
        }
        Command::Evaluate(a) => {
            set_opt(&mut cfg.data, a.data.clone());
            set_opt(&mut cfg.groups, a.groups.clone());
            set_opt(&mut cfg.out, a.out.clone());
            set(&mut cfg.seed, a.seed);
            a.scenario.apply(&mut cfg);
            a.policy_args.apply(&mut cfg)?;
        }
        Command::Bench(a) => {
            a.scenario.apply(&mut cfg);
            set(&mut cfg.bench.reps, a.reps);
            set(&mut cfg.bench.base_seed, a.base_seed);
            set(&mut cfg.bench.methods, a.methods.clone());
            set(&mut cfg.bench.test_size, a.test_size);
            set_opt(&mut cfg.out, a.out.clone());
            a.calibration.apply(&mut cfg);
            a.fusion.apply(&mut cfg);
            a.policy.apply(&mut cfg)?;
        }
    }
    Ok(cfg)
}

fn exit_code(class: ErrorClass) -> u8 {
    match class {
        ErrorClass::Io => 2,
        ErrorClass::Validation => 3,
        ErrorClass::Solver => 4,
    }
}

fn run(cli: &Cli) -> Result<(), Error> {
    let cfg = effective_config(cli)?;
    if let Some(n) = cfg.threads {
        if n == 0 {
            return Err(Error::Invalid("--threads must be positive".into()));
        }
        // Fails only if a pool already exists, which cannot happen here.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    match &cli.command {
        Command::Simulate(_) => commands::simulate(&cfg),
        Command::Fuse(_) => commands::fuse(&cfg),
        Command::Learn(_) => commands::learn(&cfg),
        Command::Evaluate(a) => commands::evaluate(
            &cfg,
            &commands::EvaluateInputs {
                truth: a.truth.clone(),
                policy: a.policy.clone(),
                scenario_value: a.scenario_value,
            },
        ),
        Command::Bench(_) => commands::bench(&cfg),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { exit_code(ErrorClass::Validation) } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(e.class()))
        }
    }
}
