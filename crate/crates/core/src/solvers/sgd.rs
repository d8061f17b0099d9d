use nalgebra::DMatrix;
use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{
    active_columns, column_norms, gather_columns, initial_converged, KernelOutput,
    SGD_DIVERGENCE_NORM,
};
use crate::error::{GpError, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct SgdParams {
    pub minibatch_size: usize,
    pub momentum: f64,
    pub learning_rate: f64,
    pub max_steps: usize,
    pub seed: u64,
}

/// Minibatch gradient descent with heavy-ball momentum on
/// `½ uᵀ H u - uᵀ b`.
///
/// Every step samples `m` distinct rows `I`, computes the exact residual rows
/// `R[I] = b[I] - H[I, :] x` (the negative gradient restricted to `I`),
/// and moves only those rows:
///
/// ```text
/// v[I] ← momentum · v[I] + (lr / m) · R[I]
/// x[I] ← x[I] + v[I]
/// ```
///
/// The per-row scale `lr / m` is the unbiased `n / m` minibatch correction
/// combined with a `lr / n` step. A residual estimate is kept in memory and
/// overwritten on the sampled rows only; stopping is tested against that
/// estimate, so it lags the true residual on rows that have not been
/// revisited.
pub fn sgd_kernel(
    h: &DMatrix<f64>,
    b: &DMatrix<f64>,
    x0: DMatrix<f64>,
    tols: &[f64],
    params: &SgdParams,
) -> Result<KernelOutput> {
    let n = h.nrows();
    let m = params.minibatch_size.clamp(1, n.max(1));
    let step_size = params.learning_rate / m as f64;
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);

    let mut x = x0;
    let mut estimate = b.clone();
    estimate.gemm(-1.0, h, &x, 1.0);
    let b_norms = column_norms(b);
    let mut converged = initial_converged(&estimate, &b_norms, tols);
    let mut velocity = DMatrix::<f64>::zeros(n, b.ncols());
    let mut history = vec![estimate.norm()];
    let mut steps = 0;
    let mut rows_of_h = DMatrix::<f64>::zeros(n, m);

    while steps < params.max_steps {
        let active = active_columns(&converged);
        if active.is_empty() {
            break;
        }
        steps += 1;

        let mut batch = index::sample(&mut rng, n, m).into_vec();
        batch.sort_unstable();
        // H is symmetric, so columns I are the rows I.
        for (c, &i) in batch.iter().enumerate() {
            rows_of_h.set_column(c, &h.column(i));
        }
        let xa = gather_columns(&x, &active);
        let hx = rows_of_h.tr_mul(&xa);

        for (c, &j) in active.iter().enumerate() {
            for (ii, &i) in batch.iter().enumerate() {
                let res = b[(i, j)] - hx[(ii, c)];
                let v = params.momentum * velocity[(i, j)] + step_size * res;
                velocity[(i, j)] = v;
                x[(i, j)] += v;
                estimate[(i, j)] = res;
            }
        }

        let mut norm_sq = 0.0;
        for &j in &active {
            norm_sq += x.column(j).norm_squared();
        }
        if norm_sq.is_nan() {
            return Err(GpError::NanInIterate { iteration: steps });
        }
        let norm = norm_sq.sqrt();
        if norm > SGD_DIVERGENCE_NORM {
            return Err(GpError::Divergence { step: steps, norm });
        }

        for &j in &active {
            if estimate.column(j).norm() <= tols[j] * b_norms[j] {
                converged[j] = true;
            }
        }
        history.push(estimate.norm());
    }

    Ok(KernelOutput {
        solutions: x,
        residuals: estimate,
        iterations: steps,
        converged,
        residual_history: history,
    })
}
