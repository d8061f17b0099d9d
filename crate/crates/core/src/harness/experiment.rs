use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::dataset::{split_for_training, Dataset};
use crate::bounds::mean_and_standard_error;
use crate::error::{GpError, Result};
use crate::estimator::sample_probes;
use crate::exact::{predict, test_metrics, MetricSpace};
use crate::kernel::{system_matrix, Hyperparameters, SystemMatrix};
use crate::optimizer::{train, train_exact, OptTrace, TrainConfig, TrainMode};
use crate::rng::derive_seed;
use crate::solvers::{column_norms, relative_residuals, solve, Rhs, SolverConfig, SolverKind};

/// Statistical conventions written into every report, since the benchmark
/// protocol leaves them open.
pub const ASSUMPTIONS: &[&str] = &[
    "uniform shuffle per split, train fraction as recorded, default 0.9",
    "features and target z-scored with train-split mean and population std; constant features keep std 1",
    "test_rmse and test_llh are computed in standardized target units",
    "test_llh is the mean log predictive density of the noisy test targets",
    "predictions use an exact Cholesky posterior at the final hyperparameters",
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    /// One training run per entry and split.
    pub configs: Vec<TrainConfig>,
    /// Also run the exact-gradient trainer (with the first config's Adam settings).
    pub include_exact: bool,
    pub splits: usize,
    pub train_fraction: f64,
    /// Split `i` shuffles with `derive_seed(split_seed, i)`.
    pub split_seed: u64,
}

impl ExperimentConfig {
    /// Warm and cold runs of every solver in `solvers`, all sharing `base`'s seed.
    pub fn paired(base: &TrainConfig, solvers: &[SolverConfig], splits: usize) -> Self {
        let mut configs = Vec::new();
        for solver in solvers {
            for mode in [TrainMode::WarmStartFixedProbes, TrainMode::ColdStartResampled] {
                configs.push(TrainConfig {
                    solver: solver.clone(),
                    mode,
                    ..base.clone()
                });
            }
        }
        Self {
            configs,
            include_exact: false,
            splits,
            train_fraction: 0.9,
            split_seed: base.seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.splits == 0 {
            return Err(GpError::InvalidArgument("splits must be at least 1".into()));
        }
        if self.configs.is_empty() && !self.include_exact {
            return Err(GpError::InvalidArgument("no training configurations".into()));
        }
        self.configs.iter().try_for_each(TrainConfig::validate)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitRecord {
    pub split: usize,
    pub split_seed: u64,
    /// Seed handed to the trainer (probes and SGD sampling).
    pub train_seed: u64,
    pub n_train: usize,
    pub n_test: usize,
    pub test_rmse: f64,
    pub test_llh: f64,
    pub total_runtime: f64,
    pub solver_runtime: f64,
    pub iterations: Vec<usize>,
    pub total_iterations: usize,
    pub final_constrained: Vec<f64>,
    pub trace: OptTrace,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub mean: f64,
    /// `None` with a single split.
    pub standard_error: Option<f64>,
}

impl Aggregate {
    pub fn of(values: &[f64]) -> Self {
        let (mean, se) = mean_and_standard_error(values);
        Self {
            mean,
            standard_error: (values.len() >= 2).then_some(se),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentResult {
    pub dataset: String,
    /// `None` for the exact-gradient reference.
    pub solver: Option<SolverKind>,
    pub mode: Option<TrainMode>,
    pub config: TrainConfig,
    pub splits: Vec<SplitRecord>,
    pub test_rmse: Aggregate,
    pub test_llh: Aggregate,
    pub total_runtime: Aggregate,
    pub solver_runtime: Aggregate,
    pub total_iterations: Aggregate,
    /// Mean cold total runtime over mean total runtime of this run, against
    /// the cold-start run of the same solver.
    pub speed_up: Option<f64>,
    /// The same ratio computed from summed solver iterations.
    pub iteration_speed_up: Option<f64>,
}

impl ExperimentResult {
    fn from_splits(dataset: &str, config: &TrainConfig, exact: bool, splits: Vec<SplitRecord>) -> Self {
        let col = |f: fn(&SplitRecord) -> f64| -> Aggregate {
            Aggregate::of(&splits.iter().map(f).collect::<Vec<_>>())
        };
        Self {
            dataset: dataset.to_string(),
            solver: (!exact).then_some(config.solver.kind),
            mode: (!exact).then_some(config.mode),
            config: config.clone(),
            test_rmse: col(|s| s.test_rmse),
            test_llh: col(|s| s.test_llh),
            total_runtime: col(|s| s.total_runtime),
            solver_runtime: col(|s| s.solver_runtime),
            total_iterations: col(|s| s.total_iterations as f64),
            splits,
            speed_up: None,
            iteration_speed_up: None,
        }
    }

    pub fn label(&self) -> String {
        match (self.solver, self.mode) {
            (Some(s), Some(m)) => format!("{s}/{m}"),
            _ => "exact".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub dataset: String,
    pub n: usize,
    pub d: usize,
    pub splits: usize,
    pub train_fraction: f64,
    pub split_seed: u64,
    pub assumptions: Vec<String>,
    pub results: Vec<ExperimentResult>,
}

impl ExperimentReport {
    pub fn find(&self, solver: SolverKind, mode: TrainMode) -> Option<&ExperimentResult> {
        self.results
            .iter()
            .find(|r| r.solver == Some(solver) && r.mode == Some(mode))
    }
}

/// Trains on `train`, then scores the final hyperparameters on `test`.
pub fn run_split(
    train_set: &Dataset,
    test_set: &Dataset,
    config: &TrainConfig,
    exact: bool,
) -> Result<(OptTrace, f64, f64)> {
    let trace = if exact {
        train_exact(&train_set.x, &train_set.y, config)?
    } else {
        train(&train_set.x, &train_set.y, config)?
    };
    let pred = predict(&train_set.x, &train_set.y, &test_set.x, &trace.final_hyper)?;
    let metrics = test_metrics(&pred, &test_set.y, MetricSpace::Standardized)?;
    Ok((trace, metrics.rmse, metrics.mean_loglik))
}

/// Runs every configuration on every split and pairs each run with the
/// cold-start run of the same solver for the speed-up.
pub fn run_experiment(ds: &Dataset, experiment: &ExperimentConfig) -> Result<ExperimentReport> {
    experiment.validate()?;
    let mut runs: Vec<(TrainConfig, bool)> =
        experiment.configs.iter().map(|c| (c.clone(), false)).collect();
    if experiment.include_exact {
        let base = experiment.configs.first().cloned().unwrap_or_default();
        runs.push((base, true));
    }

    let mut per_run: Vec<Vec<SplitRecord>> = vec![Vec::new(); runs.len()];
    for split in 0..experiment.splits {
        let split_seed = derive_seed(experiment.split_seed, split as u64);
        let (train_set, test_set) = split_for_training(ds, experiment.train_fraction, split_seed)
            .map_err(|e| e.context(format!("split {split}")))?;
        for (r, (config, exact)) in runs.iter().enumerate() {
            let train_seed = derive_seed(config.seed, split as u64);
            let cfg = TrainConfig {
                seed: train_seed,
                ..config.clone()
            };
            let label = if *exact {
                "exact".to_string()
            } else {
                format!("{}/{}", cfg.solver.kind, cfg.mode)
            };
            let (trace, rmse, llh) = run_split(&train_set, &test_set, &cfg, *exact)
                .map_err(|e| e.context(format!("split {split}, config {label}")))?;
            let iterations = trace.iterations();
            per_run[r].push(SplitRecord {
                split,
                split_seed,
                train_seed,
                n_train: train_set.n(),
                n_test: test_set.n(),
                test_rmse: rmse,
                test_llh: llh,
                total_runtime: trace.total_seconds,
                solver_runtime: trace.solver_seconds,
                total_iterations: iterations.iter().sum(),
                iterations,
                final_constrained: trace.final_hyper.constrained_vector(),
                trace,
            });
        }
    }

    let mut results: Vec<ExperimentResult> = runs
        .iter()
        .zip(per_run)
        .map(|((cfg, exact), splits)| ExperimentResult::from_splits(&ds.name, cfg, *exact, splits))
        .collect();
    attach_speed_ups(&mut results)?;

    Ok(ExperimentReport {
        dataset: ds.name.clone(),
        n: ds.n(),
        d: ds.dim(),
        splits: experiment.splits,
        train_fraction: experiment.train_fraction,
        split_seed: experiment.split_seed,
        assumptions: ASSUMPTIONS.iter().map(|s| s.to_string()).collect(),
        results,
    })
}

fn attach_speed_ups(results: &mut [ExperimentResult]) -> Result<()> {
    let baselines: Vec<Option<usize>> = results
        .iter()
        .map(|r| {
            r.solver?;
            results.iter().position(|b| {
                b.solver == r.solver
                    && b.mode == Some(TrainMode::ColdStartResampled)
                    && b.config.solver == r.config.solver
            })
        })
        .collect();
    for (i, base) in baselines.into_iter().enumerate() {
        let Some(b) = base else { continue };
        let paired = results[i]
            .splits
            .iter()
            .zip(&results[b].splits)
            .all(|(x, y)| x.split_seed == y.split_seed && x.train_seed == y.train_seed);
        if !paired {
            return Err(GpError::InvalidArgument(format!(
                "{} and its cold baseline do not share split and probe seeds",
                results[i].label()
            )));
        }
        let speed_up = results[b].total_runtime.mean / results[i].total_runtime.mean;
        let iteration_speed_up = results[b].total_iterations.mean / results[i].total_iterations.mean;
        results[i].speed_up = Some(speed_up);
        results[i].iteration_speed_up = Some(iteration_speed_up);
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LrCandidate {
    pub learning_rate: f64,
    /// Mean exact relative residual over all columns; `None` if diverged.
    pub relative_residual: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LrSearch {
    pub chosen: f64,
    pub budget_steps: usize,
    pub candidates: Vec<LrCandidate>,
}

/// Runs `budget_steps` SGD steps per candidate on `H [v_y, V] = [y, Z]` at the
/// initial hyperparameters of `base` and keeps the candidate with the lowest
/// exact residual.
pub fn grid_search_sgd_lr(
    ds: &Dataset,
    base: &TrainConfig,
    candidates: &[f64],
    budget_steps: usize,
) -> Result<LrSearch> {
    let d = ds.dim();
    let init = vec![base.init_value; d];
    let hyper = Hyperparameters::from_constrained(&init, base.init_value, base.init_value)?;
    let h = system_matrix(&ds.x, &hyper)?;
    let probes = sample_probes(ds.n(), base.num_probes, base.probe_distribution, base.seed)?;
    let rhs = Rhs::from_parts(&ds.y, &probes.probes)?;
    let solver = SolverConfig {
        kind: SolverKind::Sgd,
        ..base.solver.clone()
    };
    grid_search_sgd_lr_system(&h, &rhs, &solver, candidates, budget_steps)
}

/// [`grid_search_sgd_lr`] on an explicit system.
pub fn grid_search_sgd_lr_system(
    h: &SystemMatrix,
    rhs: &Rhs,
    solver: &SolverConfig,
    candidates: &[f64],
    budget_steps: usize,
) -> Result<LrSearch> {
    if candidates.len() < 2 {
        return Err(GpError::InvalidArgument(
            "grid search needs at least two candidates".into(),
        ));
    }
    if budget_steps == 0 {
        return Err(GpError::InvalidArgument("budget_steps must be at least 1".into()));
    }
    let mut results = Vec::with_capacity(candidates.len());
    for &lr in candidates {
        let cfg = SolverConfig {
            kind: SolverKind::Sgd,
            learning_rate: lr,
            max_iterations: Some(budget_steps),
            // run the whole budget
            tol_mean: 1e-300,
            tol_samples: 1e-300,
            ..solver.clone()
        };
        cfg.validate()?;
        let residual = match solve(h, rhs, None, &cfg) {
            Ok(state) => {
                let exact = exact_residual(h.as_matrix(), rhs.as_matrix(), &state.solutions);
                exact.is_finite().then_some(exact)
            }
            Err(e) if e.class() == crate::error::ErrorClass::Numerical => None,
            Err(e) => return Err(e),
        };
        results.push(LrCandidate {
            learning_rate: lr,
            relative_residual: residual,
        });
    }
    let best = results
        .iter()
        .filter_map(|c| c.relative_residual.map(|r| (c.learning_rate, r)))
        .min_by(|a, b| a.1.total_cmp(&b.1));
    match best {
        Some((chosen, _)) => Ok(LrSearch {
            chosen,
            budget_steps,
            candidates: results,
        }),
        None => Err(GpError::AllCandidatesDiverged(candidates.to_vec())),
    }
}

/// Learning rates tried when none is given.
pub const DEFAULT_LR_CANDIDATES: &[f64] = &[1.0, 2.0, 5.0, 10.0, 20.0, 50.0, 100.0, 200.0, 500.0];

/// Grid search over [`DEFAULT_LR_CANDIDATES`] with a budget equal to the
/// solver's default step cap, so the search sees as many steps as a solve may use.
pub fn tune_sgd_lr(train_set: &Dataset, base: &TrainConfig) -> Result<LrSearch> {
    let solver = SolverConfig {
        kind: SolverKind::Sgd,
        max_iterations: None,
        ..base.solver.clone()
    };
    let budget = solver.max_iterations_for(train_set.n());
    let cfg = TrainConfig {
        solver,
        ..base.clone()
    };
    grid_search_sgd_lr(train_set, &cfg, DEFAULT_LR_CANDIDATES, budget)
}

fn exact_residual(h: &DMatrix<f64>, b: &DMatrix<f64>, x: &DMatrix<f64>) -> f64 {
    let mut r = b.clone();
    r.gemm(-1.0, h, x, 1.0);
    let rel = relative_residuals(&r, &column_norms(b));
    rel.iter().sum::<f64>() / rel.len() as f64
}
