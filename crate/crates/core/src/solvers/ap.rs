use nalgebra::{Cholesky, DMatrix, Dyn};

use super::{
    active_columns, column_norms, gather_columns, initial_converged, scatter_columns,
    KernelOutput,
};
use crate::error::{GpError, Result};

/// Alternating projections: block Gauss–Seidel over contiguous index blocks.
///
/// Each block system `H[I, I] δ = R[I, :]` is solved exactly with a Cholesky
/// factor computed once per call. The residual is updated incrementally
/// inside an epoch and recomputed exactly at the end of every epoch, which is
/// also when convergence is tested.
pub fn ap_kernel(
    h: &DMatrix<f64>,
    b: &DMatrix<f64>,
    x0: DMatrix<f64>,
    tols: &[f64],
    block_size: usize,
    max_epochs: usize,
) -> Result<KernelOutput> {
    let n = h.nrows();
    let block_size = block_size.clamp(1, n.max(1));
    let mut x = x0;
    let mut r = b.clone();
    r.gemm(-1.0, h, &x, 1.0);
    let b_norms = column_norms(b);
    let mut converged = initial_converged(&r, &b_norms, tols);
    let mut history = vec![r.norm()];
    let mut epochs = 0;

    if active_columns(&converged).is_empty() || max_epochs == 0 {
        return Ok(KernelOutput {
            solutions: x,
            residuals: r,
            iterations: 0,
            converged,
            residual_history: history,
        });
    }

    let blocks: Vec<(usize, usize)> = (0..n)
        .step_by(block_size)
        .map(|start| (start, block_size.min(n - start)))
        .collect();
    let factors = blocks
        .iter()
        .map(|&(start, len)| {
            Cholesky::new(h.view((start, start), (len, len)).clone_owned()).ok_or_else(|| {
                GpError::NotPositiveDefinite(format!(
                    "block starting at row {start} failed to factorise"
                ))
            })
        })
        .collect::<Result<Vec<Cholesky<f64, Dyn>>>>()?;

    while epochs < max_epochs {
        let active = active_columns(&converged);
        if active.is_empty() {
            break;
        }
        epochs += 1;

        let mut xa = gather_columns(&x, &active);
        let mut ra = gather_columns(&r, &active);
        for (&(start, len), factor) in blocks.iter().zip(&factors) {
            let delta = factor.solve(&ra.rows(start, len));
            let mut xb = xa.rows_mut(start, len);
            xb += &delta;
            ra.gemm(-1.0, &h.columns(start, len), &delta, 1.0);
        }
        // exact refresh once per epoch
        let mut fresh = gather_columns(b, &active);
        fresh.gemm(-1.0, h, &xa, 1.0);
        if fresh.iter().any(|v| !v.is_finite()) {
            return Err(GpError::NanInIterate { iteration: epochs });
        }
        scatter_columns(&mut x, &xa, &active);
        scatter_columns(&mut r, &fresh, &active);

        for &j in &active {
            if r.column(j).norm() <= tols[j] * b_norms[j] {
                converged[j] = true;
            }
        }
        history.push(r.norm());
    }

    Ok(KernelOutput {
        solutions: x,
        residuals: r,
        iterations: epochs,
        converged,
        residual_history: history,
    })
}
