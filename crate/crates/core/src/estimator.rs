//! Probe vectors and the stochastic marginal-likelihood gradient.
//!
//! With `v_y ≈ H⁻¹ y` and `v_j ≈ H⁻¹ z_j` the gradient estimate for raw
//! coordinate `k` is
//!
//! ```text
//! g̃_k = ½ v_yᵀ ∂H_k v_y  -  ½ (1/s) Σ_j v_jᵀ ∂H_k z_j
//! ```
//!
//! The first term is the data fit, the second a Hutchinson estimate of
//! `½ tr(H⁻¹ ∂H_k)`. Only products of `∂H_k` with vectors are ever formed.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{GpError, Result};
use crate::kernel::{contract_derivatives, DerivativeMatrix, Hyperparameters, SystemMatrix};
use crate::rng::stream_rng;
use crate::solvers::SolveState;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProbeDistribution {
    Gaussian,
    Rademacher,
    /// `z_j = √n e_j` for `j = 1..n`: a deterministic design with
    /// `(1/n) Σ z_j z_jᵀ = I` that makes the trace estimate exact.
    ScaledBasis,
}

impl std::str::FromStr for ProbeDistribution {
    type Err = GpError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "gaussian" | "normal" => Ok(Self::Gaussian),
            "rademacher" => Ok(Self::Rademacher),
            other => Err(GpError::InvalidArgument(format!(
                "unknown probe distribution '{other}'"
            ))),
        }
    }
}

/// Whether a probe set is reused for every optimiser step or redrawn.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProbeMode {
    Fixed,
    Resampled,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProbeSet {
    /// `n × s`, one probe per column.
    pub probes: DMatrix<f64>,
    pub distribution: ProbeDistribution,
    pub seed: u64,
    /// Substream the probes were drawn from (the optimiser step in resampled mode).
    pub stream: u64,
    pub mode: ProbeMode,
}

impl ProbeSet {
    pub fn n(&self) -> usize {
        self.probes.nrows()
    }

    pub fn s(&self) -> usize {
        self.probes.ncols()
    }

    /// `E[z⁴]` of a single probe coordinate.
    pub fn fourth_moment(&self) -> f64 {
        fourth_moment(self.distribution, self.n())
    }

    pub fn with_mode(mut self, mode: ProbeMode) -> Self {
        self.mode = mode;
        self
    }

    /// The deterministic `√n e_j` design with `s = n`.
    pub fn scaled_basis(n: usize) -> Self {
        Self {
            probes: DMatrix::identity(n, n) * (n as f64).sqrt(),
            distribution: ProbeDistribution::ScaledBasis,
            seed: 0,
            stream: 0,
            mode: ProbeMode::Fixed,
        }
    }
}

pub fn fourth_moment(distribution: ProbeDistribution, n: usize) -> f64 {
    match distribution {
        ProbeDistribution::Gaussian => 3.0,
        ProbeDistribution::Rademacher => 1.0,
        ProbeDistribution::ScaledBasis => n as f64,
    }
}

/// Draws `s` independent probes of length `n`.
pub fn sample_probes(
    n: usize,
    s: usize,
    distribution: ProbeDistribution,
    seed: u64,
) -> Result<ProbeSet> {
    sample_probes_stream(n, s, distribution, seed, 0)
}

/// As [`sample_probes`], drawing from substream `stream` of `seed`.
pub fn sample_probes_stream(
    n: usize,
    s: usize,
    distribution: ProbeDistribution,
    seed: u64,
    stream: u64,
) -> Result<ProbeSet> {
    if n == 0 || s == 0 {
        return Err(GpError::InvalidArgument(format!(
            "probe set needs n, s >= 1 (got n = {n}, s = {s})"
        )));
    }
    let mut rng = stream_rng(seed, stream);
    let probes = match distribution {
        ProbeDistribution::Gaussian => {
            DMatrix::from_fn(n, s, |_, _| rng.sample::<f64, _>(StandardNormal))
        }
        ProbeDistribution::Rademacher => {
            DMatrix::from_fn(n, s, |_, _| if rng.random::<bool>() { 1.0 } else { -1.0 })
        }
        ProbeDistribution::ScaledBasis => {
            if s != n {
                return Err(GpError::InvalidArgument(
                    "the scaled basis design requires s = n".into(),
                ));
            }
            return Ok(ProbeSet::scaled_basis(n));
        }
    };
    Ok(ProbeSet {
        probes,
        distribution,
        seed,
        stream,
        mode: ProbeMode::Fixed,
    })
}

/// Estimated gradient in raw hyperparameter space.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradientEstimate {
    pub values: Vec<f64>,
    /// `½ v_yᵀ ∂H_k v_y`
    pub quadratic_term: Vec<f64>,
    /// `½ (1/s) Σ_j v_jᵀ ∂H_k z_j`
    pub trace_term: Vec<f64>,
}

impl GradientEstimate {
    fn from_terms(quadratic_term: Vec<f64>, trace_term: Vec<f64>) -> Self {
        let values = quadratic_term
            .iter()
            .zip(&trace_term)
            .map(|(q, t)| q - t)
            .collect();
        Self {
            values,
            quadratic_term,
            trace_term,
        }
    }
}

fn check_solve_shapes(v_y: &DVector<f64>, probe_solves: &DMatrix<f64>, probes: &ProbeSet) -> Result<()> {
    let n = v_y.len();
    if probe_solves.shape() != probes.probes.shape() {
        return Err(GpError::DimensionMismatch {
            what: "probe solves vs probes",
            expected: probes.s(),
            got: probe_solves.ncols(),
        });
    }
    if probes.n() != n {
        return Err(GpError::DimensionMismatch {
            what: "probe length vs mean solve",
            expected: n,
            got: probes.n(),
        });
    }
    Ok(())
}

/// Assembles `g̃` from explicit derivative matrices.
pub fn assemble_gradient(
    v_y: &DVector<f64>,
    probe_solves: &DMatrix<f64>,
    probes: &ProbeSet,
    derivs: &[DerivativeMatrix],
) -> Result<GradientEstimate> {
    check_solve_shapes(v_y, probe_solves, probes)?;
    let n = v_y.len();
    let s = probes.s() as f64;
    let mut quadratic = vec![0.0; derivs.len()];
    let mut trace = vec![0.0; derivs.len()];
    for (k, dm) in derivs.iter().enumerate() {
        if dm.matrix.shape() != (n, n) {
            return Err(GpError::DimensionMismatch {
                what: "derivative matrix size",
                expected: n,
                got: dm.matrix.nrows(),
            });
        }
        quadratic[k] = 0.5 * v_y.dot(&(&dm.matrix * v_y));
        let dz = &dm.matrix * &probes.probes;
        let sum: f64 = probe_solves
            .column_iter()
            .zip(dz.column_iter())
            .map(|(v, d)| v.dot(&d))
            .sum();
        trace[k] = 0.5 * sum / s;
    }
    Ok(GradientEstimate::from_terms(quadratic, trace))
}

/// Assembles `g̃` without materialising any derivative matrix.
///
/// Uses `v_jᵀ ∂H z_j = Σ_ab ∂H(a, b) v_j(a) z_j(b)`: the outer products are
/// accumulated into two `n × n` weight matrices which are then contracted
/// against the derivative entries on the fly. Agrees with
/// [`assemble_gradient`] up to rounding and needs `O(n²)` instead of
/// `O(d n²)` memory.
pub fn assemble_gradient_contracted(
    x: &DMatrix<f64>,
    hyper: &Hyperparameters,
    v_y: &DVector<f64>,
    probe_solves: &DMatrix<f64>,
    probes: &ProbeSet,
) -> Result<GradientEstimate> {
    check_solve_shapes(v_y, probe_solves, probes)?;
    let quad_weight = v_y * v_y.transpose();
    let mut trace_weight = probe_solves * probes.probes.transpose();
    trace_weight /= probes.s() as f64;
    let sums = contract_derivatives(x, hyper, &[&quad_weight, &trace_weight])?;
    let quadratic = sums[0].iter().map(|v| 0.5 * v).collect();
    let trace = sums[1].iter().map(|v| 0.5 * v).collect();
    Ok(GradientEstimate::from_terms(quadratic, trace))
}

/// Root-mean-square distance between `start` and `solution` in the norm
/// induced by `H`: `sqrt(mean_j (x0_j - x*_j)ᵀ H (x0_j - x*_j) / n)`.
pub fn curvature_distance(
    start: &DMatrix<f64>,
    solution: &DMatrix<f64>,
    h: &SystemMatrix,
) -> Result<f64> {
    if start.shape() != solution.shape() || start.nrows() != h.n() {
        return Err(GpError::DimensionMismatch {
            what: "warm start vs solution shape",
            expected: solution.ncols(),
            got: start.ncols(),
        });
    }
    let diff = start - solution;
    let hd = h.as_matrix() * &diff;
    let n = h.n() as f64;
    let m = diff.ncols() as f64;
    let total: f64 = diff
        .column_iter()
        .zip(hd.column_iter())
        .map(|(e, he)| e.dot(&he) / n)
        .sum();
    Ok((total / m).max(0.0).sqrt())
}

/// [`curvature_distance`] from a previous solve's solutions to the current
/// solution.
pub fn warm_start_distance(
    prev: &SolveState,
    current_solution: &DMatrix<f64>,
    h: &SystemMatrix,
) -> Result<f64> {
    curvature_distance(&prev.solutions, current_solution, h)
}
