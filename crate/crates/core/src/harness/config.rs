//! Flat `key = value` run configuration.
//!
//! Every key is optional and mirrors a command-line flag of the same name
//! (with `-` spelled `_`). Values given on the command line win over values
//! read from a file:
//!
//! ```toml
//! synthetic = "2000,26,0"
//! solver = "ap"
//! mode = "warm"
//! steps = 50
//! lr = 0.1
//! probes = 16
//! seed = 1
//! splits = 5
//! block_size = 300
//! ```

use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{GpError, Result};
use crate::estimator::ProbeDistribution;
use crate::optimizer::{TrainConfig, TrainMode};
use crate::solvers::{SolverConfig, SolverKind};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub data: Option<PathBuf>,
    pub target_col: Option<String>,
    /// `"n,d,seed"`.
    pub synthetic: Option<String>,
    pub solver: Option<SolverKind>,
    pub mode: Option<TrainMode>,
    pub steps: Option<usize>,
    /// Adam learning rate.
    pub lr: Option<f64>,
    pub probes: Option<usize>,
    pub probe_distribution: Option<ProbeDistribution>,
    pub seed: Option<u64>,
    pub splits: Option<usize>,
    pub train_fraction: Option<f64>,
    pub out: Option<PathBuf>,
    pub format: Option<String>,
    pub tol_mean: Option<f64>,
    pub tol_samples: Option<f64>,
    pub max_iterations: Option<usize>,
    pub block_size: Option<usize>,
    pub minibatch_size: Option<usize>,
    pub momentum: Option<f64>,
    pub sgd_lr: Option<f64>,
    /// Learning rates tried by `gridsearch-lr`.
    pub candidates: Option<Vec<f64>>,
    pub budget_steps: Option<usize>,
    pub trials: Option<usize>,
    pub include_exact: Option<bool>,
}

macro_rules! overlay {
    ($base:ident, $top:ident, $($field:ident),* $(,)?) => {
        RunConfig { $($field: $top.$field.or($base.$field)),* }
    };
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| {
            let line = e
                .span()
                .map(|s| text[..s.start].matches('\n').count() as u64 + 1)
                .unwrap_or(0);
            GpError::Parse {
                line,
                message: e.message().to_string(),
            }
        })
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml_str(&text).map_err(|e| e.context(path.display().to_string()))
    }

    /// `top`'s values where present, otherwise `self`'s.
    pub fn overlay(self, top: RunConfig) -> RunConfig {
        let base = self;
        overlay!(
            base,
            top,
            data,
            target_col,
            synthetic,
            solver,
            mode,
            steps,
            lr,
            probes,
            probe_distribution,
            seed,
            splits,
            train_fraction,
            out,
            format,
            tol_mean,
            tol_samples,
            max_iterations,
            block_size,
            minibatch_size,
            momentum,
            sgd_lr,
            candidates,
            budget_steps,
            trials,
            include_exact,
        )
    }

    /// Solver settings: `desk` defaults for `n` training rows, overridden by
    /// whatever is set here.
    pub fn solver_config(&self, kind: SolverKind, n: usize) -> SolverConfig {
        let mut s = desk_solver_config(kind, n);
        if let Some(v) = self.tol_mean {
            s.tol_mean = v;
        }
        if let Some(v) = self.tol_samples {
            s.tol_samples = v;
        }
        if self.max_iterations.is_some() {
            s.max_iterations = self.max_iterations;
        }
        if let Some(v) = self.block_size {
            s.block_size = v;
        }
        if let Some(v) = self.minibatch_size {
            s.minibatch_size = v;
        }
        if let Some(v) = self.momentum {
            s.momentum = v;
        }
        if let Some(v) = self.sgd_lr {
            s.learning_rate = v;
        }
        if let Some(v) = self.seed {
            s.seed = v;
        }
        s
    }

    pub fn train_config(&self, n: usize) -> TrainConfig {
        let mut t = TrainConfig::default();
        if let Some(v) = self.steps {
            t.steps = v;
        }
        if let Some(v) = self.lr {
            t.adam.learning_rate = v;
        }
        if let Some(v) = self.probes {
            t.num_probes = v;
        }
        if let Some(v) = self.probe_distribution {
            t.probe_distribution = v;
        }
        if let Some(v) = self.mode {
            t.mode = v;
        }
        if let Some(v) = self.seed {
            t.seed = v;
        }
        t.solver = self.solver_config(self.solver.unwrap_or(SolverKind::Cg), n);
        t
    }
}

/// `n,d,seed` triple for synthetic data.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SyntheticSpec {
    pub n: usize,
    pub d: usize,
    pub seed: u64,
}

impl FromStr for SyntheticSpec {
    type Err = GpError;

    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split(',').map(str::trim).collect();
        let bad = || GpError::InvalidArgument(format!("expected n,d,seed but got '{s}'"));
        if parts.len() != 3 {
            return Err(bad());
        }
        let spec = SyntheticSpec {
            n: parts[0].parse().map_err(|_| bad())?,
            d: parts[1].parse().map_err(|_| bad())?,
            seed: parts[2].parse().map_err(|_| bad())?,
        };
        if spec.n < 2 || spec.d == 0 {
            return Err(GpError::InvalidArgument(format!(
                "synthetic data needs n >= 2 and d >= 1, got '{s}'"
            )));
        }
        Ok(spec)
    }
}

/// Solver settings sized for a single-machine benchmark on `n` rows.
///
/// AP uses roughly six blocks so that an epoch is much cheaper than a direct
/// solve; SGD samples a quarter of the rows per step. The SGD learning rate
/// is data dependent and left at its default; see
/// [`tune_sgd_lr`](super::experiment::tune_sgd_lr).
pub fn desk_solver_config(kind: SolverKind, n: usize) -> SolverConfig {
    let mut s = SolverConfig::new(kind);
    match kind {
        SolverKind::Cg => {}
        SolverKind::Ap => s.block_size = n.div_ceil(6).max(1),
        SolverKind::Sgd => s.minibatch_size = n.div_ceil(4).max(1),
    }
    s
}
