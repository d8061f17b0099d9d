use nalgebra::DMatrix;

use super::{
    active_columns, column_norms, gather_columns, initial_converged, KernelOutput,
    CG_RESIDUAL_REFRESH,
};
use crate::error::{GpError, Result};

/// Unpreconditioned conjugate gradients, run independently on every column.
///
/// The matrix products of all still-active columns are batched into one
/// `H P` product per iteration.
pub fn cg_kernel(
    h: &DMatrix<f64>,
    b: &DMatrix<f64>,
    x0: DMatrix<f64>,
    tols: &[f64],
    max_iter: usize,
) -> Result<KernelOutput> {
    let mut x = x0;
    let mut r = b.clone();
    r.gemm(-1.0, h, &x, 1.0);
    let b_norms = column_norms(b);
    let mut converged = initial_converged(&r, &b_norms, tols);
    let mut p = r.clone();
    let mut rr: Vec<f64> = r.column_iter().map(|c| c.norm_squared()).collect();
    let mut history = vec![r.norm()];
    let mut iterations = 0;

    while iterations < max_iter {
        let active = active_columns(&converged);
        if active.is_empty() {
            break;
        }
        iterations += 1;

        let pa = gather_columns(&p, &active);
        let hp = h * &pa;
        for (c, &j) in active.iter().enumerate() {
            let curvature = pa.column(c).dot(&hp.column(c));
            if curvature.is_nan() {
                return Err(GpError::NanInIterate {
                    iteration: iterations,
                });
            }
            if curvature <= 0.0 {
                return Err(GpError::NotPositiveDefinite(format!(
                    "CG found non-positive curvature {curvature:.3e} in column {j}"
                )));
            }
            let alpha = rr[j] / curvature;
            x.column_mut(j).axpy(alpha, &pa.column(c), 1.0);
            r.column_mut(j).axpy(-alpha, &hp.column(c), 1.0);
        }

        if iterations % CG_RESIDUAL_REFRESH == 0 {
            let xa = gather_columns(&x, &active);
            let mut ra = gather_columns(b, &active);
            ra.gemm(-1.0, h, &xa, 1.0);
            for (c, &j) in active.iter().enumerate() {
                r.set_column(j, &ra.column(c));
            }
        }

        for &j in &active {
            let rr_new = r.column(j).norm_squared();
            if !rr_new.is_finite() {
                return Err(GpError::NanInIterate {
                    iteration: iterations,
                });
            }
            if rr_new.sqrt() <= tols[j] * b_norms[j] {
                converged[j] = true;
                continue;
            }
            let beta = rr_new / rr[j];
            rr[j] = rr_new;
            let mut pj = p.column_mut(j);
            pj *= beta;
            pj += r.column(j);
        }
        history.push(r.norm());
    }

    Ok(KernelOutput {
        solutions: x,
        residuals: r,
        iterations,
        converged,
        residual_history: history,
    })
}
