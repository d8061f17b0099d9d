//! Batched solvers for `H [v_y, v_1, .., v_s] = [y, z_1, .., z_s]`.
//!
//! All three solvers share the same contract: every column is driven to its
//! own relative-residual tolerance (`tol_mean` for column 0, `tol_samples`
//! for the probe columns), a column is frozen as soon as it meets it, and the
//! call returns once every column has converged or the iteration cap is hit.
//! Hitting the cap is reported through [`SolveState::converged`], not as an
//! error.
//!
//! The iteration unit differs per solver and is what `iterations_used`
//! counts: one CG iteration, one AP epoch (a sweep over all blocks), or one
//! SGD step (one minibatch).

mod ap;
mod cg;
mod sgd;

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{GpError, Result};
use crate::kernel::SystemMatrix;

pub use ap::ap_kernel;
pub use cg::cg_kernel;
pub use sgd::{sgd_kernel, SgdParams};

/// Interval (in iterations) at which CG replaces its recurrence residual with
/// an explicit `b - Hx`.
pub const CG_RESIDUAL_REFRESH: usize = 50;

/// Iterate norm above which SGD is declared divergent.
pub const SGD_DIVERGENCE_NORM: f64 = 1e12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SolverKind {
    Cg,
    Ap,
    Sgd,
}

impl SolverKind {
    pub const ALL: [SolverKind; 3] = [SolverKind::Cg, SolverKind::Ap, SolverKind::Sgd];

    pub fn as_str(self) -> &'static str {
        match self {
            SolverKind::Cg => "cg",
            SolverKind::Ap => "ap",
            SolverKind::Sgd => "sgd",
        }
    }
}

impl fmt::Display for SolverKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SolverKind {
    type Err = GpError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "cg" => Ok(SolverKind::Cg),
            "ap" => Ok(SolverKind::Ap),
            "sgd" => Ok(SolverKind::Sgd),
            other => Err(GpError::InvalidArgument(format!(
                "unknown solver '{other}' (expected cg, ap or sgd)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SolverConfig {
    pub kind: SolverKind,
    /// Relative residual tolerance of the mean system (column 0).
    pub tol_mean: f64,
    /// Relative residual tolerance of the probe systems.
    pub tol_samples: f64,
    /// `None` selects the per-solver default, see [`SolverConfig::max_iterations_for`].
    pub max_iterations: Option<usize>,
    /// AP block size; clamped to `n`.
    pub block_size: usize,
    /// SGD minibatch size; clamped to `n`.
    pub minibatch_size: usize,
    pub momentum: f64,
    /// SGD learning rate. The per-row step is `learning_rate / minibatch_size`.
    pub learning_rate: f64,
    pub seed: u64,
}

impl SolverConfig {
    pub fn new(kind: SolverKind) -> Self {
        Self {
            kind,
            tol_mean: 0.01,
            tol_samples: 0.1,
            max_iterations: None,
            block_size: 2000,
            minibatch_size: 1000,
            momentum: 0.9,
            learning_rate: 1.0,
            seed: 0,
        }
    }

    pub fn with_tolerances(mut self, tol_mean: f64, tol_samples: f64) -> Self {
        self.tol_mean = tol_mean;
        self.tol_samples = tol_samples;
        self
    }

    /// Default caps: CG `10 n`, AP 1000 epochs, SGD `100 n / minibatch` steps.
    pub fn max_iterations_for(&self, n: usize) -> usize {
        if let Some(m) = self.max_iterations {
            return m;
        }
        match self.kind {
            SolverKind::Cg => 10 * n,
            SolverKind::Ap => 1000,
            SolverKind::Sgd => (100 * n).div_ceil(self.minibatch_size.clamp(1, n.max(1))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, tol) in [("tol_mean", self.tol_mean), ("tol_samples", self.tol_samples)] {
            if !(tol > 0.0 && tol < 1.0) {
                return Err(GpError::InvalidArgument(format!(
                    "{name} must lie in (0, 1), got {tol}"
                )));
            }
        }
        if self.block_size == 0 || self.minibatch_size == 0 {
            return Err(GpError::InvalidArgument(
                "block_size and minibatch_size must be at least 1".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(GpError::InvalidArgument(format!(
                "momentum must lie in [0, 1), got {}",
                self.momentum
            )));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(GpError::InvalidArgument(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        Ok(())
    }

    fn column_tolerances(&self, columns: usize) -> Vec<f64> {
        (0..columns)
            .map(|j| if j == 0 { self.tol_mean } else { self.tol_samples })
            .collect()
    }
}

/// Right-hand sides `[y, z_1, .., z_s]`; column 0 is the mean system.
#[derive(Clone, Debug, PartialEq)]
pub struct Rhs(DMatrix<f64>);

impl Rhs {
    pub fn new(columns: DMatrix<f64>) -> Result<Self> {
        if columns.ncols() == 0 {
            return Err(GpError::InvalidArgument(
                "right-hand side needs at least one column".into(),
            ));
        }
        if columns.iter().any(|v| !v.is_finite()) {
            return Err(GpError::NonFinite("right-hand side"));
        }
        Ok(Self(columns))
    }

    /// Stacks the targets and the probe matrix column-wise.
    pub fn from_parts(y: &DVector<f64>, probes: &DMatrix<f64>) -> Result<Self> {
        if probes.nrows() != y.len() && probes.ncols() > 0 {
            return Err(GpError::DimensionMismatch {
                what: "probe rows vs targets",
                expected: y.len(),
                got: probes.nrows(),
            });
        }
        let n = y.len();
        let s = probes.ncols();
        let mut m = DMatrix::zeros(n, s + 1);
        m.set_column(0, y);
        for j in 0..s {
            m.set_column(j + 1, &probes.column(j));
        }
        Self::new(m)
    }

    pub fn as_matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn nrows(&self) -> usize {
        self.0.nrows()
    }

    pub fn ncols(&self) -> usize {
        self.0.ncols()
    }
}

/// Raw output of one of the solver kernels.
#[derive(Clone, Debug)]
pub struct KernelOutput {
    pub solutions: DMatrix<f64>,
    /// The solver's own residual (recurrence for CG, incremental for AP,
    /// sparsely updated estimate for SGD).
    pub residuals: DMatrix<f64>,
    pub iterations: usize,
    pub converged: Vec<bool>,
    /// Frobenius norm of the tracked residual after each iteration unit,
    /// starting with the initial residual.
    pub residual_history: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SolveState {
    pub solutions: DMatrix<f64>,
    /// `b - H x` recomputed exactly for CG and AP; for SGD this is the
    /// solver's stored estimate.
    pub residuals: DMatrix<f64>,
    pub iterations_used: usize,
    /// Exact `‖H v_j - b_j‖ / ‖b_j‖`; the absolute norm for columns with `b_j = 0`.
    pub per_column_relative_residual: Vec<f64>,
    /// Relative residual as seen by the solver when it stopped.
    pub tracked_relative_residual: Vec<f64>,
    pub converged: Vec<bool>,
    pub residual_history: Vec<f64>,
}

impl SolveState {
    pub fn all_converged(&self) -> bool {
        self.converged.iter().all(|&c| c)
    }
}

pub(crate) fn column_norms(m: &DMatrix<f64>) -> Vec<f64> {
    m.column_iter().map(|c| c.norm()).collect()
}

pub(crate) fn relative_residuals(residuals: &DMatrix<f64>, b_norms: &[f64]) -> Vec<f64> {
    residuals
        .column_iter()
        .zip(b_norms)
        .map(|(r, &bn)| if bn > 0.0 { r.norm() / bn } else { r.norm() })
        .collect()
}

/// Initial convergence flags: zero right-hand sides are done immediately,
/// others are checked against their tolerance.
pub(crate) fn initial_converged(residuals: &DMatrix<f64>, b_norms: &[f64], tols: &[f64]) -> Vec<bool> {
    residuals
        .column_iter()
        .zip(b_norms.iter().zip(tols))
        .map(|(r, (&bn, &tol))| bn == 0.0 || r.norm() <= tol * bn)
        .collect()
}

pub(crate) fn gather_columns(m: &DMatrix<f64>, cols: &[usize]) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(m.nrows(), cols.len());
    for (c, &j) in cols.iter().enumerate() {
        out.set_column(c, &m.column(j));
    }
    out
}

pub(crate) fn scatter_columns(dst: &mut DMatrix<f64>, src: &DMatrix<f64>, cols: &[usize]) {
    for (c, &j) in cols.iter().enumerate() {
        dst.set_column(j, &src.column(c));
    }
}

pub(crate) fn active_columns(converged: &[bool]) -> Vec<usize> {
    converged
        .iter()
        .enumerate()
        .filter_map(|(j, &c)| (!c).then_some(j))
        .collect()
}

/// Solves the batched system with the configured solver, starting from
/// `init` (zero when `None`).
pub fn solve(
    h: &SystemMatrix,
    rhs: &Rhs,
    init: Option<&DMatrix<f64>>,
    config: &SolverConfig,
) -> Result<SolveState> {
    config.validate()?;
    let n = h.n();
    let b = rhs.as_matrix();
    if b.nrows() != n {
        return Err(GpError::DimensionMismatch {
            what: "right-hand side rows vs system size",
            expected: n,
            got: b.nrows(),
        });
    }
    let x0 = match init {
        Some(x0) => {
            if x0.shape() != b.shape() {
                return Err(GpError::DimensionMismatch {
                    what: "initial solution columns vs right-hand side",
                    expected: b.ncols(),
                    got: x0.ncols(),
                });
            }
            x0.clone()
        }
        None => DMatrix::zeros(n, b.ncols()),
    };
    let tols = config.column_tolerances(b.ncols());
    let max_iter = config.max_iterations_for(n);
    let hm = h.as_matrix();
    let out = match config.kind {
        SolverKind::Cg => cg_kernel(hm, b, x0, &tols, max_iter)?,
        SolverKind::Ap => ap_kernel(hm, b, x0, &tols, config.block_size.min(n), max_iter)?,
        SolverKind::Sgd => sgd_kernel(
            hm,
            b,
            x0,
            &tols,
            &SgdParams {
                minibatch_size: config.minibatch_size.min(n),
                momentum: config.momentum,
                learning_rate: config.learning_rate,
                max_steps: max_iter,
                seed: config.seed,
            },
        )?,
    };

    let b_norms = column_norms(b);
    let mut exact = b.clone();
    exact.gemm(-1.0, hm, &out.solutions, 1.0);
    let tracked_relative_residual = relative_residuals(&out.residuals, &b_norms);
    let per_column_relative_residual = relative_residuals(&exact, &b_norms);
    let residuals = match config.kind {
        SolverKind::Sgd => out.residuals,
        _ => exact,
    };
    Ok(SolveState {
        solutions: out.solutions,
        residuals,
        iterations_used: out.iterations,
        per_column_relative_residual,
        tracked_relative_residual,
        converged: out.converged,
        residual_history: out.residual_history,
    })
}
