//! Cholesky reference path: exact marginal likelihood, its gradient, the
//! predictive posterior and test metrics.
//!
//! Everything here is `O(n³)` and guarded by [`DENSE_LIMIT`]. It is the
//! ground truth the iterative path is compared against.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::{Deserialize, Serialize};

use crate::error::{GpError, Result};
use crate::estimator::GradientEstimate;
use crate::kernel::{contract_derivatives, cross_covariance, system_matrix, Hyperparameters};

/// Largest `n` accepted by the dense routines.
pub const DENSE_LIMIT: usize = 20_000;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

fn check_problem(x: &DMatrix<f64>, y: &DVector<f64>) -> Result<()> {
    let n = x.nrows();
    if n == 0 {
        return Err(GpError::InvalidArgument("empty training set".into()));
    }
    if y.len() != n {
        return Err(GpError::DimensionMismatch {
            what: "targets vs inputs",
            expected: n,
            got: y.len(),
        });
    }
    if n > DENSE_LIMIT {
        return Err(GpError::TooLarge {
            n,
            limit: DENSE_LIMIT,
        });
    }
    if y.iter().any(|v| !v.is_finite()) {
        return Err(GpError::NonFinite("targets"));
    }
    Ok(())
}

/// Cholesky factor of `H` together with `α = H⁻¹ y`.
pub struct ExactFit {
    pub cholesky: Cholesky<f64, Dyn>,
    pub alpha: DVector<f64>,
}

impl ExactFit {
    pub fn new(x: &DMatrix<f64>, y: &DVector<f64>, hyper: &Hyperparameters) -> Result<Self> {
        check_problem(x, y)?;
        let h = system_matrix(x, hyper)?;
        let cholesky = Cholesky::new(h.into_inner()).ok_or_else(|| {
            GpError::NotPositiveDefinite("Cholesky factorisation of H failed".into())
        })?;
        let alpha = cholesky.solve(y);
        Ok(Self { cholesky, alpha })
    }

    pub fn log_det(&self) -> f64 {
        2.0 * self.cholesky.l_dirty().diagonal().iter().map(|v| v.ln()).sum::<f64>()
    }
}

/// `-½ yᵀ H⁻¹ y - ½ log det H - (n/2) log 2π`.
pub fn exact_mll(x: &DMatrix<f64>, y: &DVector<f64>, hyper: &Hyperparameters) -> Result<f64> {
    let fit = ExactFit::new(x, y, hyper)?;
    let n = y.len() as f64;
    Ok(-0.5 * y.dot(&fit.alpha) - 0.5 * fit.log_det() - 0.5 * n * LN_2PI)
}

/// Exact gradient of [`exact_mll`] with respect to the raw hyperparameters.
pub fn exact_gradient(
    x: &DMatrix<f64>,
    y: &DVector<f64>,
    hyper: &Hyperparameters,
) -> Result<Vec<f64>> {
    Ok(exact_gradient_terms(x, y, hyper)?.values)
}

/// [`exact_gradient`] split into the data-fit term `½ αᵀ ∂H α` and the exact
/// trace term `½ tr(H⁻¹ ∂H)`.
pub fn exact_gradient_terms(
    x: &DMatrix<f64>,
    y: &DVector<f64>,
    hyper: &Hyperparameters,
) -> Result<GradientEstimate> {
    let fit = ExactFit::new(x, y, hyper)?;
    let quad = &fit.alpha * fit.alpha.transpose();
    let inverse = fit.cholesky.inverse();
    let sums = contract_derivatives(x, hyper, &[&quad, &inverse])?;
    let quadratic_term: Vec<f64> = sums[0].iter().map(|v| 0.5 * v).collect();
    let trace_term: Vec<f64> = sums[1].iter().map(|v| 0.5 * v).collect();
    let values = quadratic_term
        .iter()
        .zip(&trace_term)
        .map(|(q, t)| q - t)
        .collect();
    Ok(GradientEstimate {
        values,
        quadratic_term,
        trace_term,
    })
}

/// Posterior marginals of the latent function at test inputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictiveDistribution {
    pub means: Vec<f64>,
    /// Latent variances, excluding observation noise.
    pub variances: Vec<f64>,
    /// `σ²` used when scoring observed targets.
    pub noise_variance: f64,
}

/// Zero-mean GP posterior mean and latent variance at `x_test`.
pub fn predict(
    x_train: &DMatrix<f64>,
    y: &DVector<f64>,
    x_test: &DMatrix<f64>,
    hyper: &Hyperparameters,
) -> Result<PredictiveDistribution> {
    let fit = ExactFit::new(x_train, y, hyper)?;
    predict_with(&fit, x_train, x_test, hyper)
}

/// [`predict`] reusing an existing factorisation.
pub fn predict_with(
    fit: &ExactFit,
    x_train: &DMatrix<f64>,
    x_test: &DMatrix<f64>,
    hyper: &Hyperparameters,
) -> Result<PredictiveDistribution> {
    let noise_variance = hyper.noise_scale().powi(2);
    if x_test.nrows() == 0 {
        return Ok(PredictiveDistribution {
            means: Vec::new(),
            variances: Vec::new(),
            noise_variance,
        });
    }
    let k_train_test = cross_covariance(x_train, x_test, hyper)?;
    let means = k_train_test.tr_mul(&fit.alpha);
    let mut whitened = k_train_test;
    // columns become L⁻¹ k(x, x*)
    fit.cholesky.l_dirty().solve_lower_triangular_mut(&mut whitened);
    let prior = hyper.signal_scale().powi(2);
    let mut variances = Vec::with_capacity(x_test.nrows());
    for (j, col) in whitened.column_iter().enumerate() {
        let v = prior - col.norm_squared();
        if v.is_nan() || v < -1e-10 {
            return Err(GpError::NotPositiveDefinite(format!(
                "negative predictive variance {v:.3e} at test point {j}"
            )));
        }
        variances.push(v.max(0.0));
    }
    Ok(PredictiveDistribution {
        means: means.iter().copied().collect(),
        variances,
        noise_variance,
    })
}

/// Affine map between original and standardised targets.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TargetScaling {
    pub mean: f64,
    pub std: f64,
}

/// Units in which test metrics are reported.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum MetricSpace {
    /// Predictions and targets are used as given (z-scored on the train split).
    Standardized,
    /// Undo a standardisation first: RMSE scales by `std`, the log density
    /// shifts by `-log std`.
    Original(TargetScaling),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TestMetrics {
    pub rmse: f64,
    pub mean_loglik: f64,
}

/// Test RMSE and mean predictive log-likelihood of observed targets, using
/// latent variance plus noise.
pub fn test_metrics(
    pred: &PredictiveDistribution,
    y_test: &DVector<f64>,
    space: MetricSpace,
) -> Result<TestMetrics> {
    let m = y_test.len();
    if pred.means.len() != m || pred.variances.len() != m {
        return Err(GpError::DimensionMismatch {
            what: "predictions vs test targets",
            expected: m,
            got: pred.means.len(),
        });
    }
    if m == 0 {
        return Err(GpError::InvalidArgument("empty test set".into()));
    }
    let mut sq = 0.0;
    let mut ll = 0.0;
    for i in 0..m {
        let err = pred.means[i] - y_test[i];
        let var = pred.variances[i] + pred.noise_variance;
        sq += err * err;
        ll += -0.5 * (LN_2PI + var.ln() + err * err / var);
    }
    let rmse = (sq / m as f64).sqrt();
    let mean_loglik = ll / m as f64;
    Ok(match space {
        MetricSpace::Standardized => TestMetrics { rmse, mean_loglik },
        MetricSpace::Original(s) => TestMetrics {
            rmse: rmse * s.std,
            mean_loglik: mean_loglik - s.std.ln(),
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn problem(n: usize, d: usize, seed: u64) -> (DMatrix<f64>, DVector<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = DMatrix::from_fn(n, d, |_, _| rng.random::<f64>());
        let y = DVector::from_fn(n, |i, _| (3.0 * x[(i, 0)]).sin() + 0.1 * rng.random::<f64>());
        (x, y)
    }

    #[test]
    fn scalar_mll_closed_form() {
        let x = DMatrix::from_element(1, 1, 0.0);
        let hyper = Hyperparameters::from_constrained(&[1.0], 1.5, 0.5).unwrap();
        let h = 1.5f64.powi(2) + 0.25;
        let a = 0.7;
        let y = DVector::from_element(1, a);
        let expect = -a * a / (2.0 * h) - 0.5 * h.ln() - 0.5 * (2.0 * std::f64::consts::PI).ln();
        let got = exact_mll(&x, &y, &hyper).unwrap();
        assert!((got - expect).abs() <= 1e-12 * expect.abs());
    }

    #[test]
    fn zero_targets_with_near_identity() {
        // Far-apart points make K ≈ s_f² I; s_f tiny and σ = 1 give H ≈ I.
        let x = DMatrix::from_column_slice(2, 1, &[0.0, 1e3]);
        let hyper = Hyperparameters::from_constrained(&[1.0], 1e-9, 1.0).unwrap();
        let y = DVector::zeros(2);
        let got = exact_mll(&x, &y, &hyper).unwrap();
        let expect = -(2.0 * std::f64::consts::PI).ln();
        assert!((got - expect).abs() < 1e-12);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let (x, y) = problem(60, 2, 1);
        let hyper = Hyperparameters::from_constrained(&[0.4, 0.9], 1.2, 0.3).unwrap();
        let g = exact_gradient(&x, &y, &hyper).unwrap();
        let raw = hyper.raw_vector();
        for k in 0..raw.len() {
            let step = 1e-5;
            let mut p = raw.clone();
            let mut m = raw.clone();
            p[k] += step;
            m[k] -= step;
            let fp = exact_mll(&x, &y, &Hyperparameters::from_raw_vector(&p).unwrap()).unwrap();
            let fm = exact_mll(&x, &y, &Hyperparameters::from_raw_vector(&m).unwrap()).unwrap();
            let fd = (fp - fm) / (2.0 * step);
            assert!((g[k] - fd).abs() <= 1e-5 * fd.abs().max(1e-3), "k={k}: {} vs {fd}", g[k]);
        }
    }

    #[test]
    fn noise_gradient_algebraic_reduction() {
        let (x, y) = problem(30, 1, 2);
        let hyper = Hyperparameters::from_constrained(&[0.5], 1.0, 0.2).unwrap();
        let g = exact_gradient(&x, &y, &hyper).unwrap();
        let h = system_matrix(&x, &hyper).unwrap().into_inner();
        let inv = h.cholesky().unwrap().inverse();
        let alpha = &inv * &y;
        let c = 2.0 * hyper.noise_scale() * crate::kernel::softplus_derivative(hyper.raw_noise);
        let expect = c * (0.5 * alpha.norm_squared() - 0.5 * inv.trace());
        assert!((g[hyper.noise_index()] - expect).abs() <= 1e-10 * expect.abs());
    }

    #[test]
    fn mll_is_permutation_invariant() {
        let (x, y) = problem(40, 2, 3);
        let hyper = Hyperparameters::unit(2);
        let perm: Vec<usize> = (0..40).rev().collect();
        let xp = x.select_rows(&perm);
        let yp = DVector::from_fn(40, |i, _| y[perm[i]]);
        let a = exact_mll(&x, &y, &hyper).unwrap();
        let b = exact_mll(&xp, &yp, &hyper).unwrap();
        assert!((a - b).abs() <= 1e-10 * a.abs());
    }

    #[test]
    fn interpolation_limit() {
        let (x, y) = problem(10, 1, 4);
        let hyper = Hyperparameters::from_constrained(&[0.3], 1.0, 1e-6).unwrap();
        let pred = predict(&x, &y, &x.rows(3, 1).clone_owned(), &hyper).unwrap();
        assert!((pred.means[0] - y[3]).abs() < 1e-4);
        assert!(pred.variances[0] < 1e-4);
    }

    #[test]
    fn prior_reversion_far_away() {
        let (x, y) = problem(10, 1, 5);
        let hyper = Hyperparameters::from_constrained(&[0.3], 1.7, 0.1).unwrap();
        let far = DMatrix::from_element(1, 1, 1e4);
        let pred = predict(&x, &y, &far, &hyper).unwrap();
        assert!(pred.means[0].abs() < 1e-12);
        assert!((pred.variances[0] - 1.7f64.powi(2)).abs() < 1e-9);
    }

    #[test]
    fn prediction_matches_explicit_inverse() {
        let (x, y) = problem(50, 2, 6);
        let (xt, _) = problem(7, 2, 7);
        let hyper = Hyperparameters::from_constrained(&[0.5, 0.8], 1.3, 0.2).unwrap();
        let pred = predict(&x, &y, &xt, &hyper).unwrap();
        let h = system_matrix(&x, &hyper).unwrap().into_inner();
        let inv = h.try_inverse().unwrap();
        let ks = cross_covariance(&xt, &x, &hyper).unwrap();
        let mean = &ks * &inv * &y;
        let cov = cross_covariance(&xt, &xt, &hyper).unwrap() - &ks * &inv * ks.transpose();
        for i in 0..7 {
            assert!((pred.means[i] - mean[i]).abs() < 1e-8);
            assert!((pred.variances[i] - cov[(i, i)]).abs() < 1e-8);
        }
    }

    #[test]
    fn empty_test_set() {
        let (x, y) = problem(5, 1, 8);
        let pred = predict(&x, &y, &DMatrix::zeros(0, 1), &Hyperparameters::unit(1)).unwrap();
        assert!(pred.means.is_empty() && pred.variances.is_empty());
    }

    #[test]
    fn metric_special_cases() {
        let var = 1.0 / (2.0 * std::f64::consts::PI);
        let pred = PredictiveDistribution {
            means: vec![1.0, -2.0],
            variances: vec![var / 2.0, var / 2.0],
            noise_variance: var / 2.0,
        };
        let y = DVector::from_vec(vec![1.0, -2.0]);
        let m = test_metrics(&pred, &y, MetricSpace::Standardized).unwrap();
        assert_eq!(m.rmse, 0.0);
        assert!(m.mean_loglik.abs() < 1e-14);

        let pred = PredictiveDistribution {
            means: vec![0.0],
            variances: vec![0.5],
            noise_variance: 0.5,
        };
        let m = test_metrics(&pred, &DVector::from_element(1, 0.0), MetricSpace::Standardized)
            .unwrap();
        assert!((m.mean_loglik + 0.918_938_533_204_672_7).abs() < 1e-12);
    }

    #[test]
    fn metrics_match_scalar_density_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let m = 25;
        let pred = PredictiveDistribution {
            means: (0..m).map(|_| rng.random::<f64>() - 0.5).collect(),
            variances: (0..m).map(|_| rng.random::<f64>()).collect(),
            noise_variance: 0.05,
        };
        let y = DVector::from_fn(m, |_, _| rng.random::<f64>() - 0.5);
        let got = test_metrics(&pred, &y, MetricSpace::Standardized).unwrap();
        let oracle: f64 = (0..m)
            .map(|i| {
                let sd = (pred.variances[i] + pred.noise_variance).sqrt();
                let z = (y[i] - pred.means[i]) / sd;
                ((-0.5 * z * z).exp() / (sd * (2.0 * std::f64::consts::PI).sqrt())).ln()
            })
            .sum::<f64>()
            / m as f64;
        assert!((got.mean_loglik - oracle).abs() < 1e-10);

        let scaled = test_metrics(
            &pred,
            &y,
            MetricSpace::Original(TargetScaling { mean: 3.0, std: 2.0 }),
        )
        .unwrap();
        assert!((scaled.rmse - 2.0 * got.rmse).abs() < 1e-14);
        assert!((scaled.mean_loglik - (got.mean_loglik - 2f64.ln())).abs() < 1e-14);
    }

    #[test]
    fn dense_guard() {
        let x = DMatrix::zeros(DENSE_LIMIT + 1, 1);
        let y = DVector::zeros(DENSE_LIMIT + 1);
        assert!(matches!(
            exact_mll(&x, &y, &Hyperparameters::unit(1)),
            Err(GpError::TooLarge { .. })
        ));
    }
}
