use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use warmgp::bounds::{check_outer_product_error, BoundReport};
use warmgp::error::ErrorClass;
use warmgp::estimator::ProbeDistribution;
use warmgp::exact::{predict, test_metrics, MetricSpace};
use warmgp::harness::experiment::{run_experiment, tune_sgd_lr, DEFAULT_LR_CANDIDATES};
use warmgp::harness::report::{write_report, zero_wall_times};
use warmgp::harness::{
    default_truth, emit_report, grid_search_sgd_lr, load_csv, split_for_training, synthesize,
    Dataset, ExperimentConfig, ReportFormat, RunConfig, SyntheticSpec, Tabular,
};
use warmgp::rng::derive_seed;
use warmgp::optimizer::{train, train_exact, TrainConfig, TrainMode};
use warmgp::solvers::SolverKind;
use warmgp::{GpError, Result};

#[derive(Parser)]
#[command(name = "warmgp", version, about = "Iterative Gaussian process hyperparameter training with warm-started solvers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train once on the first split and emit the per-step trace.
    Train(Common),
    /// Train with exact Cholesky gradients and emit the trace.
    Exact(Common),
    /// Paired warm/cold runs over solvers and splits.
    Bench(BenchArgs),
    /// Monte Carlo check of the probe outer-product error over a grid.
    VerifyBounds(BoundsArgs),
    /// Pick an SGD learning rate by short solves at the initial hyperparameters.
    GridsearchLr(GridArgs),
}

#[derive(Args, Clone, Default)]
struct Common {
    /// Headed CSV file with numeric columns.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Target column name (default: last column).
    #[arg(long)]
    target_col: Option<String>,
    /// Synthetic data as n,d,seed.
    #[arg(long)]
    synthetic: Option<String>,
    #[arg(long, value_parser = parse_solver)]
    solver: Option<SolverKind>,
    #[arg(long, value_parser = parse_mode)]
    mode: Option<TrainMode>,
    /// Adam steps.
    #[arg(long)]
    steps: Option<usize>,
    /// Adam learning rate.
    #[arg(long)]
    lr: Option<f64>,
    /// Number of probe vectors.
    #[arg(long)]
    probes: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    splits: Option<usize>,
    /// Output path (default: stdout).
    #[arg(long)]
    out: Option<PathBuf>,
    /// json or csv.
    #[arg(long)]
    format: Option<String>,
    /// Flat TOML file with defaults for any of these flags.
    #[arg(long)]
    config: Option<PathBuf>,
    /// SGD learning rate (default: chosen by grid search).
    #[arg(long)]
    sgd_lr: Option<f64>,
    #[arg(long)]
    block_size: Option<usize>,
    #[arg(long)]
    minibatch_size: Option<usize>,
    #[arg(long)]
    tol_mean: Option<f64>,
    #[arg(long)]
    tol_samples: Option<f64>,
    #[arg(long)]
    max_iterations: Option<usize>,
}

#[derive(Args)]
struct BenchArgs {
    #[command(flatten)]
    common: Common,
    /// Also run the exact-gradient trainer.
    #[arg(long)]
    include_exact: bool,
    /// Write zeros in every wall-clock field so repeated runs compare equal.
    #[arg(long)]
    zero_timings: bool,
}

#[derive(Args)]
struct BoundsArgs {
    #[command(flatten)]
    common: Common,
    /// Trials per grid cell.
    #[arg(long)]
    trials: Option<usize>,
}

#[derive(Args)]
struct GridArgs {
    #[command(flatten)]
    common: Common,
    /// Comma-separated candidate learning rates.
    #[arg(long, value_delimiter = ',')]
    candidates: Option<Vec<f64>>,
    /// SGD steps per candidate (default: the solver's step cap).
    #[arg(long)]
    budget_steps: Option<usize>,
}

fn parse_solver(s: &str) -> std::result::Result<SolverKind, String> {
    s.parse().map_err(|e: GpError| e.to_string())
}

fn parse_mode(s: &str) -> std::result::Result<TrainMode, String> {
    s.parse().map_err(|e: GpError| e.to_string())
}

impl Common {
    fn flags(&self) -> RunConfig {
        RunConfig {
            data: self.data.clone(),
            target_col: self.target_col.clone(),
            synthetic: self.synthetic.clone(),
            solver: self.solver,
            mode: self.mode,
            steps: self.steps,
            lr: self.lr,
            probes: self.probes,
            seed: self.seed,
            splits: self.splits,
            out: self.out.clone(),
            format: self.format.clone(),
            sgd_lr: self.sgd_lr,
            block_size: self.block_size,
            minibatch_size: self.minibatch_size,
            tol_mean: self.tol_mean,
            tol_samples: self.tol_samples,
            max_iterations: self.max_iterations,
            ..RunConfig::default()
        }
    }

    fn resolve(&self, extra: RunConfig) -> Result<RunConfig> {
        let file = match &self.config {
            Some(path) => RunConfig::from_path(path)?,
            None => RunConfig::default(),
        };
        Ok(file.overlay(self.flags()).overlay(extra))
    }
}

fn format_of(cfg: &RunConfig) -> Result<ReportFormat> {
    cfg.format.as_deref().unwrap_or("json").parse()
}

fn load_dataset(cfg: &RunConfig) -> Result<Dataset> {
    match (&cfg.data, &cfg.synthetic) {
        (Some(_), Some(_)) => Err(GpError::InvalidArgument(
            "give either --data or --synthetic, not both".into(),
        )),
        (Some(path), None) => {
            let (ds, report) = load_csv(path, cfg.target_col.as_deref())?;
            for w in &report.warnings {
                eprintln!("warning: {w} (lines {:?})", report.rejected_lines);
            }
            Ok(ds)
        }
        (None, Some(spec)) => {
            let spec: SyntheticSpec = spec.parse()?;
            synthesize(spec.n, &default_truth(spec.d)?, spec.seed)
        }
        (None, None) => Err(GpError::InvalidArgument(
            "no data: pass --data <csv> or --synthetic n,d,seed".into(),
        )),
    }
}

fn emit<T: Serialize + Tabular>(value: &T, cfg: &RunConfig) -> Result<()> {
    let format = format_of(cfg)?;
    match &cfg.out {
        Some(path) => emit_report(value, path, format),
        None => {
            let stdout = std::io::stdout();
            let mut lock = stdout.lock();
            write_report(value, &mut lock, format)?;
            lock.flush()?;
            Ok(())
        }
    }
}

/// Train config for `train_set`, with the SGD learning rate tuned when unset.
fn train_config(cfg: &RunConfig, train_set: &Dataset, kind: SolverKind) -> Result<TrainConfig> {
    let mut t = cfg.train_config(train_set.n());
    t.solver = cfg.solver_config(kind, train_set.n());
    if kind == SolverKind::Sgd && cfg.sgd_lr.is_none() {
        let search = tune_sgd_lr(train_set, &t)?;
        eprintln!("sgd learning rate {} chosen by grid search", search.chosen);
        t.solver.learning_rate = search.chosen;
    }
    Ok(t)
}

fn first_split(cfg: &RunConfig, ds: &Dataset) -> Result<(Dataset, Dataset)> {
    split_for_training(ds, cfg.train_fraction.unwrap_or(0.9), cfg.seed.unwrap_or(0))
}

fn run_train(common: &Common, exact: bool) -> Result<()> {
    let cfg = common.resolve(RunConfig::default())?;
    let ds = load_dataset(&cfg)?;
    let (train_set, test_set) = first_split(&cfg, &ds)?;
    let kind = cfg.solver.unwrap_or(SolverKind::Cg);
    let t = if exact {
        cfg.train_config(train_set.n())
    } else {
        train_config(&cfg, &train_set, kind)?
    };
    let trace = if exact {
        train_exact(&train_set.x, &train_set.y, &t)?
    } else {
        train(&train_set.x, &train_set.y, &t)?
    };
    let pred = predict(&train_set.x, &train_set.y, &test_set.x, &trace.final_hyper)?;
    let m = test_metrics(&pred, &test_set.y, MetricSpace::Standardized)?;
    eprintln!(
        "{} steps, {} solver iterations, test rmse {:.4}, test llh {:.4}, {:.2}s",
        trace.steps.len(),
        trace.iterations().iter().sum::<usize>(),
        m.rmse,
        m.mean_loglik,
        trace.total_seconds
    );
    emit(&trace, &cfg)
}

fn run_bench(args: &BenchArgs) -> Result<()> {
    let cfg = args.common.resolve(RunConfig {
        include_exact: args.include_exact.then_some(true),
        ..RunConfig::default()
    })?;
    let ds = load_dataset(&cfg)?;
    let splits = cfg.splits.unwrap_or(10);
    let seed = cfg.seed.unwrap_or(0);
    let train_fraction = cfg.train_fraction.unwrap_or(0.9);
    let (probe_train, _) = split_for_training(&ds, train_fraction, derive_seed(seed, 0))?;
    let kinds = match cfg.solver {
        Some(k) => vec![k],
        None => SolverKind::ALL.to_vec(),
    };
    let mut solvers = Vec::new();
    let mut base = cfg.train_config(probe_train.n());
    for kind in kinds {
        let t = train_config(&cfg, &probe_train, kind)?;
        solvers.push(t.solver.clone());
        base = t;
    }
    let mut experiment = ExperimentConfig::paired(&base, &solvers, splits);
    experiment.include_exact = cfg.include_exact.unwrap_or(false);
    experiment.train_fraction = train_fraction;
    experiment.split_seed = seed;
    let report = run_experiment(&ds, &experiment)?;
    for r in &report.results {
        eprintln!(
            "{:<16} llh {:>8.4}  rmse {:.4}  iterations {:>8.1}  speed-up {}",
            r.label(),
            r.test_llh.mean,
            r.test_rmse.mean,
            r.total_iterations.mean,
            r.speed_up.map_or("-".into(), |s| format!("{s:.2}x"))
        );
    }
    if args.zero_timings && format_of(&cfg)? == ReportFormat::Json {
        let mut value = serde_json::to_value(&report)?;
        zero_wall_times(&mut value);
        let report: warmgp::harness::ExperimentReport = serde_json::from_value(value)?;
        return emit(&report, &cfg);
    }
    emit(&report, &cfg)
}

/// The grid used by `verify-bounds`.
const BOUND_NS: [usize; 5] = [1, 2, 8, 32, 64];
const BOUND_SS: [usize; 4] = [1, 4, 16, 32];

fn run_bounds(args: &BoundsArgs) -> Result<()> {
    let cfg = args.common.resolve(RunConfig {
        trials: args.trials,
        ..RunConfig::default()
    })?;
    let trials = cfg.trials.unwrap_or(10_000);
    let seed = cfg.seed.unwrap_or(0);
    let mut reports: Vec<BoundReport> = Vec::new();
    let mut outside = 0;
    for dist in [ProbeDistribution::Gaussian, ProbeDistribution::Rademacher] {
        for n in BOUND_NS {
            for s in BOUND_SS {
                let cell_seed = seed ^ ((n as u64) << 16) ^ ((s as u64) << 8);
                let mut r = check_outer_product_error(n, s, dist, trials, cell_seed)?;
                if !r.within(4.0) {
                    r = check_outer_product_error(n, s, dist, trials, cell_seed.wrapping_add(1 << 40))?;
                }
                if !r.within(4.0) {
                    outside += 1;
                }
                reports.push(r);
            }
        }
    }
    eprintln!("{} cells, {outside} outside 4 standard errors", reports.len());
    emit(&reports, &cfg)
}

fn run_grid(args: &GridArgs) -> Result<()> {
    let cfg = args.common.resolve(RunConfig {
        candidates: args.candidates.clone(),
        budget_steps: args.budget_steps,
        ..RunConfig::default()
    })?;
    let ds = load_dataset(&cfg)?;
    let (train_set, _) = first_split(&cfg, &ds)?;
    let mut t = cfg.train_config(train_set.n());
    t.solver = cfg.solver_config(SolverKind::Sgd, train_set.n());
    let candidates = cfg
        .candidates
        .clone()
        .unwrap_or_else(|| DEFAULT_LR_CANDIDATES.to_vec());
    let budget = cfg
        .budget_steps
        .unwrap_or_else(|| t.solver.max_iterations_for(train_set.n()));
    let search = grid_search_sgd_lr(&train_set, &t, &candidates, budget)?;
    eprintln!("chosen learning rate {}", search.chosen);
    emit(&search, &cfg)
}

fn exit_code(err: &GpError) -> u8 {
    match err.class() {
        ErrorClass::Validation => 2,
        ErrorClass::Numerical => 3,
        ErrorClass::Io => 4,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Train(c) => run_train(c, false),
        Command::Exact(c) => run_train(c, true),
        Command::Bench(b) => run_bench(b),
        Command::VerifyBounds(b) => run_bounds(b),
        Command::GridsearchLr(g) => run_grid(g),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
