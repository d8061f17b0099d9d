//! End-to-end acceptance checks.
//!
//! Runs without the libtest harness so that every check prints exactly one
//! `PASS`/`FAIL` line. Pass criterion numbers as arguments to run a subset:
//! `cargo test --test acceptance -- 3 5`.

use std::process::ExitCode;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use warmgp::bounds::{check_outer_product_error, gradient_error_histogram};
use warmgp::estimator::{
    assemble_gradient, sample_probes_stream, ProbeDistribution, ProbeSet,
};
use warmgp::exact::{exact_gradient, exact_gradient_terms, exact_mll};
use warmgp::harness::experiment::{run_split, tune_sgd_lr};
use warmgp::harness::report::strip_wall_times;
use warmgp::harness::{
    default_truth, desk_solver_config, run_experiment, split_standardize, synthesize,
    ExperimentConfig, ExperimentReport,
};
use warmgp::kernel::{derivative_matrices, matern32, system_matrix, Hyperparameters};
use warmgp::optimizer::{TrainConfig, TrainMode};
use warmgp::rng::derive_seed;
use warmgp::solvers::{solve, Rhs, SolverConfig, SolverKind};

// Tolerances and sizes, one block per criterion.
const KERNEL_CONSTANT_TOL: f64 = 1e-12;
const KERNEL_FD_TOL: f64 = 1e-6;
const KERNEL_INSTANCES: usize = 20;
const KERNEL_N: usize = 100;

const SOLVER_SYSTEMS: usize = 20;
const SOLVER_N: usize = 300;
const SOLVER_COLUMNS: usize = 5;
const SOLVER_TOL: f64 = 1e-8;
const SOLVER_MATCH_TOL: f64 = 1e-6;

const EXACT_N: usize = 100;
const EXACT_MLL_TOL: f64 = 1e-8;
const EXACT_GRAD_TOL: f64 = 1e-5;
const SCALAR_MLL_TOL: f64 = 1e-12;

const UNBIASED_N: usize = 200;
const UNBIASED_REDRAWS: usize = 200;
const UNBIASED_S: usize = 64;
const UNBIASED_SIGMAS: f64 = 3.0;
const BASIS_TRACE_TOL: f64 = 1e-10;

const OUTER_NS: [usize; 5] = [1, 2, 8, 32, 64];
const OUTER_SS: [usize; 4] = [1, 4, 16, 32];
const OUTER_TRIALS: usize = 10_000;
const OUTER_SIGMAS: f64 = 4.0;

const TRAJ_N: usize = 500;
const TRAJ_D: usize = 3;
const TRAJ_STEPS: usize = 100;
const TRAJ_PROBES: usize = 16;
const TRAJ_HYPER_TOL: f64 = 0.05;
const TRAJ_LLH_TOL: f64 = 0.02;

const BENCH_N: usize = 2000;
const BENCH_D: usize = 26;
const BENCH_STEPS: usize = 50;
const BENCH_SEEDS: u64 = 5;
const BENCH_WINDOW: (usize, usize) = (10, 50);
const AP_RATIO: f64 = 0.5;
const CG_SGD_RATIO: f64 = 0.8;
const MIN_GOOD_SEEDS: usize = 4;
const PARITY_LLH_TOL: f64 = 0.02;
const PARITY_RMSE_TOL: f64 = 0.005;

const DECAY_N: usize = 200;
const DECAY_SS: [usize; 5] = [4, 16, 64, 256, 1024];
const DECAY_TRIALS: usize = 200;
const DECAY_SLOPE: f64 = -0.5;
const DECAY_SLOPE_TOL: f64 = 0.15;

type Check = (usize, &'static str, fn() -> Outcome);

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(f64::MIN_POSITIVE)
}

fn random_inputs(n: usize, d: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    DMatrix::from_fn(n, d, |_, _| rng.random::<f64>())
}

fn random_hyper(d: usize, rng: &mut ChaCha8Rng) -> Hyperparameters {
    Hyperparameters::from_raw(
        (0..d).map(|_| rng.random_range(-1.0..1.0)).collect(),
        rng.random_range(-0.5..0.5),
        rng.random_range(-1.0..0.5),
    )
}

fn perturbed(hyper: &Hyperparameters, k: usize, delta: f64) -> Hyperparameters {
    let mut raw = hyper.raw_vector();
    raw[k] += delta;
    Hyperparameters::from_raw_vector(&raw).unwrap()
}

fn kernel_correctness() -> Outcome {
    let unit = Hyperparameters::from_constrained(&[1.0], 1.0, 0.5).unwrap();
    let value = matern32(&[0.0], &[1.0], &unit).unwrap();
    let expected = (1.0 + 3f64.sqrt()) * (-(3f64.sqrt())).exp();
    let constant_err = (value - expected).abs();

    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let step = 1e-5;
    let mut worst: f64 = 0.0;
    for _ in 0..KERNEL_INSTANCES {
        let d = rng.random_range(1..=4);
        let x = random_inputs(KERNEL_N, d, &mut rng);
        let hyper = random_hyper(d, &mut rng);
        for dm in derivative_matrices(&x, &hyper).unwrap() {
            let k = dm.parameter_index;
            let plus = system_matrix(&x, &perturbed(&hyper, k, step)).unwrap().into_inner();
            let minus = system_matrix(&x, &perturbed(&hyper, k, -step)).unwrap().into_inner();
            let fd = (plus - minus) / (2.0 * step);
            worst = worst.max((&dm.matrix - &fd).norm() / fd.norm());
        }
    }
    outcome(
        constant_err <= KERNEL_CONSTANT_TOL && worst <= KERNEL_FD_TOL,
        format!("constant error {constant_err:.1e}, worst derivative error {worst:.1e}"),
    )
}

fn solver_equivalence() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let mut worst = [0.0f64; 3];
    let mut max_iterations = [0usize; 3];
    let mut all_converged = true;
    for system in 0..SOLVER_SYSTEMS {
        let x = random_inputs(SOLVER_N, 3, &mut rng);
        let hyper = random_hyper(3, &mut rng);
        let h = system_matrix(&x, &hyper).unwrap();
        let b = DMatrix::from_fn(SOLVER_N, SOLVER_COLUMNS, |_, _| rng.random::<f64>() - 0.5);
        let direct = h.as_matrix().clone().lu().solve(&b).unwrap();
        let rhs = Rhs::new(b).unwrap();
        for (i, kind) in SolverKind::ALL.into_iter().enumerate() {
            let mut cfg = SolverConfig::new(kind).with_tolerances(SOLVER_TOL, SOLVER_TOL);
            cfg.seed = system as u64;
            match kind {
                SolverKind::Cg => {}
                SolverKind::Ap => {
                    cfg.block_size = SOLVER_N / 6;
                    cfg.max_iterations = Some(100_000);
                }
                SolverKind::Sgd => {
                    cfg.minibatch_size = SOLVER_N;
                    cfg.learning_rate = 1.0;
                    cfg.max_iterations = Some(100_000);
                }
            }
            let st = solve(&h, &rhs, None, &cfg).unwrap();
            all_converged &= st.all_converged();
            max_iterations[i] = max_iterations[i].max(st.iterations_used);
            for j in 0..SOLVER_COLUMNS {
                let err = (st.solutions.column(j) - direct.column(j)).norm() / direct.column(j).norm();
                worst[i] = worst[i].max(err);
            }
        }
    }
    let pass = all_converged
        && worst.iter().all(|&w| w <= SOLVER_MATCH_TOL)
        && max_iterations[0] <= SOLVER_N;
    outcome(
        pass,
        format!(
            "worst column error cg {:.1e} ap {:.1e} sgd {:.1e}, max iterations {:?}, all converged {all_converged}",
            worst[0], worst[1], worst[2], max_iterations
        ),
    )
}

/// Marginal likelihood from an LU factorisation.
fn determinant_mll(x: &DMatrix<f64>, y: &DVector<f64>, hyper: &Hyperparameters) -> f64 {
    let h = system_matrix(x, hyper).unwrap().into_inner();
    let lu = h.lu();
    let log_det: f64 = lu.u().diagonal().iter().map(|v| v.abs().ln()).sum();
    let alpha = lu.solve(y).unwrap();
    let n = y.len() as f64;
    -0.5 * y.dot(&alpha) - 0.5 * log_det - 0.5 * n * (2.0 * std::f64::consts::PI).ln()
}

fn exact_path() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(33);
    let x = random_inputs(EXACT_N, 3, &mut rng);
    let y = DVector::from_fn(EXACT_N, |_, _| rng.random::<f64>() - 0.5);
    let hyper = random_hyper(3, &mut rng);

    let mll = exact_mll(&x, &y, &hyper).unwrap();
    let oracle = determinant_mll(&x, &y, &hyper);
    let mll_err = rel(mll, oracle);

    let grad = exact_gradient(&x, &y, &hyper).unwrap();
    let step = 1e-5;
    let mut grad_err: f64 = 0.0;
    for (k, g) in grad.iter().enumerate() {
        let fd = (exact_mll(&x, &y, &perturbed(&hyper, k, step)).unwrap()
            - exact_mll(&x, &y, &perturbed(&hyper, k, -step)).unwrap())
            / (2.0 * step);
        grad_err = grad_err.max(rel(*g, fd));
    }

    let one = Hyperparameters::from_constrained(&[0.8], 1.3, 0.4).unwrap();
    let (sf, sigma, y0) = (1.3f64, 0.4f64, 0.7f64);
    let var = sf * sf + sigma * sigma;
    let closed = -0.5 * y0 * y0 / var - 0.5 * var.ln() - 0.5 * (2.0 * std::f64::consts::PI).ln();
    let scalar = exact_mll(
        &DMatrix::from_element(1, 1, 0.2),
        &DVector::from_element(1, y0),
        &one,
    )
    .unwrap();
    let scalar_err = (scalar - closed).abs();

    outcome(
        mll_err <= EXACT_MLL_TOL && grad_err <= EXACT_GRAD_TOL && scalar_err <= SCALAR_MLL_TOL,
        format!("mll {mll:.6} vs {oracle:.6} error {mll_err:.1e}, gradient error {grad_err:.1e}, scalar error {scalar_err:.1e}"),
    )
}

fn estimator_unbiasedness() -> Outcome {
    let truth = Hyperparameters::from_constrained(&[0.6, 0.9], 1.0, 0.3).unwrap();
    let ds = synthesize(UNBIASED_N, &truth, 44).unwrap();
    let hyper = Hyperparameters::unit(2);
    let exact = exact_gradient_terms(&ds.x, &ds.y, &hyper).unwrap();
    let h = system_matrix(&ds.x, &hyper).unwrap().into_inner();
    let chol = h.cholesky().unwrap();
    let v_y = chol.solve(&ds.y);
    let derivs = derivative_matrices(&ds.x, &hyper).unwrap();

    let p = exact.values.len();
    let mut draws: Vec<Vec<f64>> = vec![Vec::with_capacity(UNBIASED_REDRAWS); p];
    for trial in 0..UNBIASED_REDRAWS {
        let probes =
            sample_probes_stream(UNBIASED_N, UNBIASED_S, ProbeDistribution::Gaussian, 44, trial as u64)
                .unwrap();
        let solves = chol.solve(&probes.probes);
        let g = assemble_gradient(&v_y, &solves, &probes, &derivs).unwrap();
        for (column, v) in draws.iter_mut().zip(&g.values) {
            column.push(*v);
        }
    }
    let mut worst_z: f64 = 0.0;
    for (column, exact_k) in draws.iter().zip(&exact.values) {
        let m = column.len() as f64;
        let mean = column.iter().sum::<f64>() / m;
        let var = column.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (m - 1.0);
        worst_z = worst_z.max((mean - exact_k).abs() / (var / m).sqrt());
    }

    let basis = ProbeSet::scaled_basis(UNBIASED_N);
    let solves = chol.solve(&basis.probes);
    let g = assemble_gradient(&v_y, &solves, &basis, &derivs).unwrap();
    let basis_err = g
        .trace_term
        .iter()
        .zip(&exact.trace_term)
        .map(|(a, b)| (a - b).abs() / b.abs().max(1.0))
        .fold(0.0, f64::max);

    outcome(
        worst_z <= UNBIASED_SIGMAS && basis_err <= BASIS_TRACE_TOL,
        format!("worst |z| {worst_z:.2}, basis trace error {basis_err:.1e}"),
    )
}

fn outer_product_grid() -> Outcome {
    let mut cells = 0;
    let mut retried = 0;
    let mut failed = Vec::new();
    let mut rademacher_unit = f64::NAN;
    for distribution in [ProbeDistribution::Gaussian, ProbeDistribution::Rademacher] {
        for &n in &OUTER_NS {
            for &s in &OUTER_SS {
                cells += 1;
                let seed = ((n as u64) << 16) ^ ((s as u64) << 8);
                let mut report = check_outer_product_error(n, s, distribution, OUTER_TRIALS, seed).unwrap();
                if !report.within(OUTER_SIGMAS) {
                    retried += 1;
                    report = check_outer_product_error(n, s, distribution, OUTER_TRIALS, derive_seed(seed, 1))
                        .unwrap();
                }
                if !report.within(OUTER_SIGMAS) {
                    failed.push(format!("{distribution:?} n={n} s={s} z={:.2}", report.z_score));
                }
                if distribution == ProbeDistribution::Rademacher && n == 1 && s == 1 {
                    rademacher_unit = report.empirical_mean.abs().max(report.theoretical_value.abs());
                }
            }
        }
    }
    outcome(
        failed.is_empty() && rademacher_unit == 0.0,
        format!(
            "{cells} cells, {retried} retried, {} outside; rademacher n=1 s=1 value {rademacher_unit}{}",
            failed.len(),
            if failed.is_empty() { String::new() } else { format!(" [{}]", failed.join(", ")) }
        ),
    )
}

fn trajectory_equivalence() -> Outcome {
    let truth = default_truth(TRAJ_D).unwrap();
    let ds = synthesize(TRAJ_N, &truth, 0).unwrap();
    let (train_set, test_set) = split_standardize(&ds, 0.9, 0).unwrap();
    let base = TrainConfig {
        steps: TRAJ_STEPS,
        num_probes: TRAJ_PROBES,
        mode: TrainMode::WarmStartFixedProbes,
        seed: 0,
        ..TrainConfig::default()
    };
    let (exact, _, exact_llh) = run_split(&train_set, &test_set, &base, true).unwrap();
    let reference = exact.final_hyper.constrained_vector();

    let mut pass = true;
    let mut parts = Vec::new();
    for kind in SolverKind::ALL {
        let mut cfg = TrainConfig {
            solver: desk_solver_config(kind, train_set.n()),
            ..base.clone()
        };
        if kind == SolverKind::Sgd {
            cfg.solver.learning_rate = tune_sgd_lr(&train_set, &cfg).unwrap().chosen;
        }
        let (trace, _, llh) = run_split(&train_set, &test_set, &cfg, false).unwrap();
        let dev = trace
            .final_hyper
            .constrained_vector()
            .iter()
            .zip(&reference)
            .map(|(a, b)| rel(*a, *b))
            .fold(0.0, f64::max);
        let dllh = (llh - exact_llh).abs();
        pass &= dev <= TRAJ_HYPER_TOL && dllh <= TRAJ_LLH_TOL;
        parts.push(format!("{kind} hyper {:.1}% llh {dllh:.4}", 100.0 * dev));
    }
    outcome(pass, parts.join(", "))
}

/// Paired warm/cold runs of all three solvers for every benchmark seed.
fn benchmark() -> Vec<ExperimentReport> {
    let truth = default_truth(BENCH_D).unwrap();
    (0..BENCH_SEEDS)
        .map(|seed| {
            let ds = synthesize(BENCH_N, &truth, seed).unwrap();
            let base = TrainConfig {
                steps: BENCH_STEPS,
                seed,
                ..TrainConfig::default()
            };
            let (train_set, _) = split_standardize(&ds, 0.9, derive_seed(seed, 0)).unwrap();
            let solvers: Vec<SolverConfig> = SolverKind::ALL
                .into_iter()
                .map(|kind| {
                    let mut s = desk_solver_config(kind, train_set.n());
                    if kind == SolverKind::Sgd {
                        let cfg = TrainConfig {
                            solver: s.clone(),
                            ..base.clone()
                        };
                        s.learning_rate = tune_sgd_lr(&train_set, &cfg).unwrap().chosen;
                    }
                    s
                })
                .collect();
            let report = run_experiment(&ds, &ExperimentConfig::paired(&base, &solvers, 1)).unwrap();
            let path = std::path::Path::new(env!("CARGO_TARGET_TMPDIR")).join(format!("bench-seed{seed}.json"));
            warmgp::harness::emit_report(&report, &path, warmgp::harness::ReportFormat::Json).unwrap();
            report
        })
        .collect()
}

fn warm_start_savings(reports: &[ExperimentReport]) -> Outcome {
    let mut pass = true;
    let mut parts = Vec::new();
    for kind in SolverKind::ALL {
        let limit = if kind == SolverKind::Ap { AP_RATIO } else { CG_SGD_RATIO };
        let mut good = 0;
        let mut ratios = Vec::new();
        let mut speed_ups = Vec::new();
        for report in reports {
            let warm = report.find(kind, TrainMode::WarmStartFixedProbes).unwrap();
            let cold = report.find(kind, TrainMode::ColdStartResampled).unwrap();
            let (from, to) = BENCH_WINDOW;
            let ratio = warm.splits[0].trace.iterations_between(from, to) as f64
                / cold.splits[0].trace.iterations_between(from, to) as f64;
            good += usize::from(ratio <= limit);
            ratios.push(format!("{ratio:.2}"));
            let speed_up = warm.speed_up.unwrap_or(f64::NAN);
            pass &= speed_up > 1.0;
            speed_ups.push(format!("{speed_up:.2}"));
        }
        pass &= good >= MIN_GOOD_SEEDS;
        parts.push(format!(
            "{kind} ratios [{}] speed-ups [{}]",
            ratios.join(" "),
            speed_ups.join(" ")
        ));
    }
    outcome(pass, parts.join("; "))
}

fn metric_parity(reports: &[ExperimentReport]) -> Outcome {
    let mut pass = true;
    let mut parts = Vec::new();
    for kind in SolverKind::ALL {
        let mut worst_llh: f64 = 0.0;
        let mut worst_rmse: f64 = 0.0;
        let mut worst_seed = 0;
        for (seed, report) in reports.iter().enumerate() {
            let warm = &report.find(kind, TrainMode::WarmStartFixedProbes).unwrap().splits[0];
            let cold = &report.find(kind, TrainMode::ColdStartResampled).unwrap().splits[0];
            let dllh = (warm.test_llh - cold.test_llh).abs();
            if dllh > worst_llh {
                worst_llh = dllh;
                worst_seed = seed;
            }
            worst_rmse = worst_rmse.max((warm.test_rmse - cold.test_rmse).abs());
        }
        pass &= worst_llh <= PARITY_LLH_TOL && worst_rmse <= PARITY_RMSE_TOL;
        parts.push(format!(
            "{kind} worst |dllh| {worst_llh:.4} (seed {worst_seed}) |drmse| {worst_rmse:.4}"
        ));
    }
    outcome(pass, parts.join(", "))
}

fn determinism() -> Outcome {
    let ds = synthesize(200, &default_truth(3).unwrap(), 9).unwrap();
    let base = TrainConfig {
        steps: 5,
        num_probes: 8,
        seed: 9,
        ..TrainConfig::default()
    };
    let solvers: Vec<SolverConfig> = SolverKind::ALL
        .into_iter()
        .map(|kind| {
            let mut s = desk_solver_config(kind, 180);
            s.learning_rate = 0.5;
            s
        })
        .collect();
    let mut experiment = ExperimentConfig::paired(&base, &solvers, 2);
    experiment.include_exact = true;
    let render = || {
        let report = run_experiment(&ds, &experiment).unwrap();
        let mut value = serde_json::to_value(&report).unwrap();
        strip_wall_times(&mut value);
        serde_json::to_string_pretty(&value).unwrap()
    };
    let (a, b) = (render(), render());
    outcome(a == b, format!("{} bytes per report, identical: {}", a.len(), a == b))
}

fn gradient_error_decay() -> Outcome {
    let truth = Hyperparameters::from_constrained(&[0.6, 0.9], 1.0, 0.3).unwrap();
    let ds = synthesize(DECAY_N, &truth, 10).unwrap();
    let table = gradient_error_histogram(
        &ds.x,
        &ds.y,
        &Hyperparameters::unit(2),
        &DECAY_SS,
        DECAY_TRIALS,
        10,
    )
    .unwrap();
    let slopes: Vec<f64> = table.q90_slopes.iter().map(|s| s.unwrap_or(f64::NAN)).collect();
    let pass = slopes.iter().all(|s| (s - DECAY_SLOPE).abs() <= DECAY_SLOPE_TOL);
    outcome(
        pass,
        format!(
            "q90 slopes [{}]",
            slopes.iter().map(|s| format!("{s:.3}")).collect::<Vec<_>>().join(" ")
        ),
    )
}

fn main() -> ExitCode {
    let wanted: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let run = |n: usize| wanted.is_empty() || wanted.contains(&n);
    let mut failures = 0;
    let mut record = |n: usize, name: &str, started: Instant, o: Outcome| {
        let tag = if o.pass { "PASS" } else { "FAIL" };
        println!(
            "{tag} criterion {n} ({name}, {:.1}s): {}",
            started.elapsed().as_secs_f64(),
            o.detail
        );
        failures += usize::from(!o.pass);
    };

    let checks: [Check; 7] = [
        (1, "kernel correctness", kernel_correctness),
        (2, "solver equivalence", solver_equivalence),
        (3, "exact path", exact_path),
        (4, "estimator unbiasedness", estimator_unbiasedness),
        (5, "outer-product error grid", outer_product_grid),
        (6, "trajectory equivalence", trajectory_equivalence),
        (9, "determinism", determinism),
    ];
    for (n, name, check) in checks.iter().take(6) {
        if run(*n) {
            let started = Instant::now();
            record(*n, name, started, check());
        }
    }
    if run(7) || run(8) {
        let started = Instant::now();
        let reports = benchmark();
        if run(7) {
            record(7, "warm-start savings", started, warm_start_savings(&reports));
        }
        if run(8) {
            record(8, "warm/cold parity", started, metric_parity(&reports));
        }
    }
    let (n, name, check) = checks[6];
    if run(n) {
        let started = Instant::now();
        record(n, name, started, check());
    }
    if run(10) {
        let started = Instant::now();
        record(10, "gradient error decay", started, gradient_error_decay());
    }

    if failures == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failures} criterion check(s) failed");
        ExitCode::FAILURE
    }
}
