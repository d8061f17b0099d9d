//! Empirical checks of the quantities that control the fixed-probe bias:
//! the second moment of the probe outer-product error, the spectral factor
//! `λ_max(H⁻¹) · λ_max(∂H)`, and the decay of gradient-estimator error in `s`.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{GpError, Result};
use crate::estimator::{fourth_moment, sample_probes_stream, ProbeDistribution};
use crate::exact::{exact_gradient_terms, ExactFit};
use crate::kernel::{derivative_matrices, Hyperparameters};
use crate::rng::stream_rng;

/// Largest `n` accepted by the dense spectral routines.
pub const SPECTRAL_LIMIT: usize = 2000;
/// Largest `n` accepted by [`gradient_error_histogram`].
pub const HISTOGRAM_LIMIT: usize = 500;
pub const MIN_OUTER_PRODUCT_TRIALS: usize = 100;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub n: usize,
    pub s: usize,
    pub distribution: ProbeDistribution,
    pub trials: usize,
    pub seed: u64,
    pub empirical_mean: f64,
    pub theoretical_value: f64,
    pub standard_error: f64,
    /// `(empirical − theoretical) / standard_error`; zero when both the
    /// difference and the standard error vanish.
    pub z_score: f64,
}

impl BoundReport {
    pub fn within(&self, sigmas: f64) -> bool {
        self.z_score.abs() <= sigmas
    }
}

/// Pairwise summation, for order-stable means over many trials.
pub fn pairwise_sum(values: &[f64]) -> f64 {
    if values.len() <= 8 {
        return values.iter().sum();
    }
    let mid = values.len() / 2;
    pairwise_sum(&values[..mid]) + pairwise_sum(&values[mid..])
}

/// Mean and standard error of the mean.
pub fn mean_and_standard_error(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = pairwise_sum(values) / n;
    if values.len() < 2 {
        return (mean, f64::NAN);
    }
    let dev: Vec<f64> = values.iter().map(|v| (v - mean) * (v - mean)).collect();
    let var = pairwise_sum(&dev) / (n - 1.0);
    (mean, (var / n).sqrt())
}

fn z_score(mean: f64, theory: f64, se: f64) -> f64 {
    let diff = mean - theory;
    if diff == 0.0 {
        0.0
    } else {
        diff / se
    }
}

fn random_unit_vector(n: usize, seed: u64) -> DVector<f64> {
    let mut rng = stream_rng(seed, 0);
    loop {
        let c = DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal));
        let norm = c.norm();
        if norm > 0.0 {
            return c / norm;
        }
    }
}

/// Monte Carlo estimate of `E ‖((1/s) Σ_p z_p z_pᵀ − I) c‖²` for a random
/// unit vector `c`, against the closed form `(E[z⁴] + n − 2) / s`.
pub fn check_outer_product_error(
    n: usize,
    s: usize,
    distribution: ProbeDistribution,
    trials: usize,
    seed: u64,
) -> Result<BoundReport> {
    if n == 0 {
        return Err(GpError::InvalidArgument("n must be at least 1".into()));
    }
    let c = random_unit_vector(n, seed);
    check_outer_product_error_with(&c, s, distribution, trials, seed)
}

/// As [`check_outer_product_error`] with a caller-supplied unit vector.
pub fn check_outer_product_error_with(
    c: &DVector<f64>,
    s: usize,
    distribution: ProbeDistribution,
    trials: usize,
    seed: u64,
) -> Result<BoundReport> {
    let n = c.len();
    if n == 0 || s == 0 {
        return Err(GpError::InvalidArgument("n and s must be at least 1".into()));
    }
    if trials < MIN_OUTER_PRODUCT_TRIALS {
        return Err(GpError::InvalidArgument(format!(
            "need at least {MIN_OUTER_PRODUCT_TRIALS} trials, got {trials}"
        )));
    }
    if distribution == ProbeDistribution::ScaledBasis {
        return Err(GpError::InvalidArgument(
            "the outer-product check needs independent random probes".into(),
        ));
    }
    let norm = c.norm();
    if (norm - 1.0).abs() > 1e-12 {
        return Err(GpError::InvalidArgument(format!("c must be a unit vector (norm {norm})")));
    }

    let mut rng = stream_rng(seed, 1);
    let mut z = DVector::<f64>::zeros(n);
    let mut mc = DVector::<f64>::zeros(n);
    let mut values = Vec::with_capacity(trials);
    for _ in 0..trials {
        mc.fill(0.0);
        for _ in 0..s {
            match distribution {
                ProbeDistribution::Gaussian => {
                    z.iter_mut().for_each(|v| *v = rng.sample(StandardNormal));
                }
                _ => z
                    .iter_mut()
                    .for_each(|v| *v = if rng.random::<bool>() { 1.0 } else { -1.0 }),
            }
            mc.axpy(z.dot(c), &z, 1.0);
        }
        mc /= s as f64;
        mc -= c;
        values.push(mc.norm_squared());
    }

    let theoretical_value = (fourth_moment(distribution, n) + n as f64 - 2.0) / s as f64;
    let (empirical_mean, standard_error) = mean_and_standard_error(&values);
    Ok(BoundReport {
        n,
        s,
        distribution,
        trials,
        seed,
        empirical_mean,
        theoretical_value,
        standard_error,
        z_score: z_score(empirical_mean, theoretical_value, standard_error),
    })
}

/// Spectral factors of the estimator-error bound for one hyperparameter.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpectralBound {
    /// `1 / λ_min(H)`.
    pub inverse_max: f64,
    /// `max |λ(∂H)|`.
    pub derivative_max: f64,
    /// `inverse_max · derivative_max`.
    pub bound: f64,
    /// Largest singular value of `H⁻¹ ∂H`.
    pub product_norm: f64,
}

/// Spectral bound for explicit matrices `H` (SPD) and `∂H` (symmetric).
pub fn spectral_bound(h: &DMatrix<f64>, dh: &DMatrix<f64>) -> Result<SpectralBound> {
    let n = h.nrows();
    if h.ncols() != n || dh.shape() != (n, n) {
        return Err(GpError::DimensionMismatch {
            what: "derivative matrix",
            expected: n,
            got: dh.nrows(),
        });
    }
    if n > SPECTRAL_LIMIT {
        return Err(GpError::TooLarge {
            n,
            limit: SPECTRAL_LIMIT,
        });
    }
    let h_eig = SymmetricEigen::new(h.clone()).eigenvalues;
    let lambda_min = h_eig.min();
    if lambda_min.is_nan() || lambda_min <= 0.0 {
        return Err(GpError::NotPositiveDefinite(format!(
            "smallest eigenvalue of H is {lambda_min:e}"
        )));
    }
    let dh_eig = SymmetricEigen::new(dh.clone()).eigenvalues;
    let derivative_max = dh_eig.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    let inverse_max = 1.0 / lambda_min;

    let chol = nalgebra::Cholesky::new(h.clone())
        .ok_or_else(|| GpError::NotPositiveDefinite("Cholesky factorisation of H failed".into()))?;
    let product = chol.solve(dh);
    let product_norm = product
        .singular_values()
        .iter()
        .fold(0.0f64, |a, v| a.max(*v));
    Ok(SpectralBound {
        inverse_max,
        derivative_max,
        bound: inverse_max * derivative_max,
        product_norm,
    })
}

/// [`spectral_bound`] for the kernel system at `hyper` and raw parameter `param_index`.
pub fn lambda_max(
    x: &DMatrix<f64>,
    hyper: &Hyperparameters,
    param_index: usize,
) -> Result<SpectralBound> {
    if x.nrows() > SPECTRAL_LIMIT {
        return Err(GpError::TooLarge {
            n: x.nrows(),
            limit: SPECTRAL_LIMIT,
        });
    }
    if param_index >= hyper.num_params() {
        return Err(GpError::InvalidArgument(format!(
            "parameter index {param_index} out of range for {} parameters",
            hyper.num_params()
        )));
    }
    let h = crate::kernel::system_matrix(x, hyper)?;
    let derivs = derivative_matrices(x, hyper)?;
    spectral_bound(h.as_matrix(), &derivs[param_index].matrix)
}

/// Error statistics of the gradient estimate at one probe count.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErrorRow {
    pub s: usize,
    /// Per coordinate: median of `|g̃_k − g_k|` over trials.
    pub median: Vec<f64>,
    /// Per coordinate: 0.9-quantile of `|g̃_k − g_k|` over trials.
    pub q90: Vec<f64>,
    /// Per coordinate: mean of `g̃_k` over trials.
    pub mean_estimate: Vec<f64>,
    /// Per coordinate: standard error of `mean_estimate`.
    pub standard_error: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradientErrorTable {
    pub n: usize,
    pub trials: usize,
    pub seed: u64,
    pub distribution: ProbeDistribution,
    pub exact_gradient: Vec<f64>,
    pub rows: Vec<ErrorRow>,
    /// Per coordinate: least-squares slope of `ln q90` against `ln s`.
    /// `None` with fewer than two distinct `s` or a zero quantile.
    pub q90_slopes: Vec<Option<f64>>,
}

/// Linear-interpolation quantile of an unsorted sample.
pub fn quantile(values: &[f64], q: f64) -> f64 {
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.total_cmp(b));
    let pos = q.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] + frac * (sorted[hi] - sorted[lo])
}

/// Least-squares slope of `ys` against `xs`.
pub fn slope(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let cov: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let var: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    cov / var
}

/// Gaussian-probe version of [`gradient_error_histogram_with`].
pub fn gradient_error_histogram(
    x: &DMatrix<f64>,
    y: &DVector<f64>,
    hyper: &Hyperparameters,
    s_values: &[usize],
    trials: usize,
    seed: u64,
) -> Result<GradientErrorTable> {
    gradient_error_histogram_with(x, y, hyper, s_values, trials, seed, ProbeDistribution::Gaussian)
}

/// Distribution of `|g̃_k − g_k|` when the linear systems are solved exactly,
/// so that all error comes from the trace estimator.
///
/// With exact solves `v_j = H⁻¹ z_j` and the trace term is
/// `(1/2s) ⟨H⁻¹ ∂H_k, Z Zᵀ⟩`; `H⁻¹ ∂H_k` is formed once and each trial costs
/// one `Z Zᵀ` product.
pub fn gradient_error_histogram_with(
    x: &DMatrix<f64>,
    y: &DVector<f64>,
    hyper: &Hyperparameters,
    s_values: &[usize],
    trials: usize,
    seed: u64,
    distribution: ProbeDistribution,
) -> Result<GradientErrorTable> {
    let n = x.nrows();
    if n > HISTOGRAM_LIMIT {
        return Err(GpError::TooLarge {
            n,
            limit: HISTOGRAM_LIMIT,
        });
    }
    if s_values.is_empty() || trials < 2 {
        return Err(GpError::InvalidArgument(
            "need at least one probe count and two trials".into(),
        ));
    }
    let exact = exact_gradient_terms(x, y, hyper)?;
    let fit = ExactFit::new(x, y, hyper)?;
    let derivs = derivative_matrices(x, hyper)?;
    // Symmetric part of H⁻¹ ∂H_k; Z Zᵀ is symmetric so only it contributes.
    let operators: Vec<DMatrix<f64>> = derivs
        .iter()
        .map(|d| {
            let a = fit.cholesky.solve(&d.matrix);
            (&a + a.transpose()) * 0.5
        })
        .collect();
    let p = operators.len();

    let mut rows = Vec::with_capacity(s_values.len());
    for (si, &s) in s_values.iter().enumerate() {
        let mut estimates = vec![Vec::with_capacity(trials); p];
        for trial in 0..trials {
            let stream = ((si as u64) << 32) | trial as u64;
            let z = sample_probes_stream(n, s, distribution, seed, stream)?.probes;
            let zzt = &z * z.transpose();
            for k in 0..p {
                let trace = operators[k].dot(&zzt) / s as f64;
                estimates[k].push(exact.quadratic_term[k] - 0.5 * trace);
            }
        }
        let mut row = ErrorRow {
            s,
            median: Vec::with_capacity(p),
            q90: Vec::with_capacity(p),
            mean_estimate: Vec::with_capacity(p),
            standard_error: Vec::with_capacity(p),
        };
        for (k, est) in estimates.iter().enumerate() {
            let errors: Vec<f64> = est.iter().map(|g| (g - exact.values[k]).abs()).collect();
            row.median.push(quantile(&errors, 0.5));
            row.q90.push(quantile(&errors, 0.9));
            let (mean, se) = mean_and_standard_error(est);
            row.mean_estimate.push(mean);
            row.standard_error.push(se);
        }
        rows.push(row);
    }

    let q90_slopes = (0..p)
        .map(|k| {
            let distinct = rows.iter().any(|r| r.s != rows[0].s);
            if !distinct || rows.iter().any(|r| r.q90[k].is_nan() || r.q90[k] <= 0.0) {
                return None;
            }
            let xs: Vec<f64> = rows.iter().map(|r| (r.s as f64).ln()).collect();
            let ys: Vec<f64> = rows.iter().map(|r| r.q90[k].ln()).collect();
            Some(slope(&xs, &ys))
        })
        .collect();

    Ok(GradientErrorTable {
        n,
        trials,
        seed,
        distribution,
        exact_gradient: exact.values,
        rows,
        q90_slopes,
    })
}
