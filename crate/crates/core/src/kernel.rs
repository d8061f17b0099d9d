//! Matérn-3/2 ARD kernel and the system matrix `H = K + σ²I`.
//!
//! Hyperparameters are stored as unconstrained ("raw") reals and mapped to
//! positive values with softplus. All derivatives produced here are with
//! respect to the raw coordinates, ordered as
//! `[lengthscale_1, .., lengthscale_d, signal, noise]`.
//!
//! The signal scale `s_f` enters as a standard deviation, so the prior
//! variance at zero distance is `s_f²`:
//!
//! ```text
//! k(x, x') = s_f² (1 + √3 r) exp(-√3 r),   r² = Σ_k ((x_k - x'_k) / ℓ_k)²
//! ```

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{GpError, Result};

const SQRT3: f64 = 1.732_050_807_568_877_2;

/// `log(1 + exp(x))`, evaluated without overflow.
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Inverse of [`softplus`] for `y > 0`.
pub fn softplus_inverse(y: f64) -> f64 {
    // log(exp(y) - 1) = y + log(1 - exp(-y))
    y + (-(-y).exp_m1()).ln()
}

/// Derivative of [`softplus`], i.e. the logistic sigmoid.
pub fn softplus_derivative(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Kernel lengthscales, signal scale and noise scale in unconstrained form.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Hyperparameters {
    pub raw_lengthscales: Vec<f64>,
    pub raw_signal: f64,
    pub raw_noise: f64,
}

impl Hyperparameters {
    pub fn from_raw(raw_lengthscales: Vec<f64>, raw_signal: f64, raw_noise: f64) -> Self {
        Self {
            raw_lengthscales,
            raw_signal,
            raw_noise,
        }
    }

    /// Builds hyperparameters from positive constrained values.
    pub fn from_constrained(lengthscales: &[f64], signal: f64, noise: f64) -> Result<Self> {
        let all_positive = lengthscales
            .iter()
            .chain([signal, noise].iter())
            .all(|v| v.is_finite() && *v > 0.0);
        if !all_positive {
            return Err(GpError::InvalidArgument(
                "constrained hyperparameters must be positive and finite".into(),
            ));
        }
        Ok(Self {
            raw_lengthscales: lengthscales.iter().map(|&l| softplus_inverse(l)).collect(),
            raw_signal: softplus_inverse(signal),
            raw_noise: softplus_inverse(noise),
        })
    }

    /// All constrained values equal to 1.0, the usual initialisation.
    pub fn unit(dim: usize) -> Self {
        let raw = softplus_inverse(1.0);
        Self {
            raw_lengthscales: vec![raw; dim],
            raw_signal: raw,
            raw_noise: raw,
        }
    }

    /// Reassembles from a raw vector laid out as `[ℓ.., signal, noise]`.
    pub fn from_raw_vector(raw: &[f64]) -> Result<Self> {
        if raw.len() < 2 {
            return Err(GpError::InvalidArgument(
                "raw parameter vector needs at least signal and noise".into(),
            ));
        }
        let d = raw.len() - 2;
        Ok(Self {
            raw_lengthscales: raw[..d].to_vec(),
            raw_signal: raw[d],
            raw_noise: raw[d + 1],
        })
    }

    pub fn dim(&self) -> usize {
        self.raw_lengthscales.len()
    }

    /// Number of raw parameters, `d + 2`.
    pub fn num_params(&self) -> usize {
        self.dim() + 2
    }

    pub fn signal_index(&self) -> usize {
        self.dim()
    }

    pub fn noise_index(&self) -> usize {
        self.dim() + 1
    }

    pub fn lengthscales(&self) -> Vec<f64> {
        self.raw_lengthscales.iter().map(|&r| softplus(r)).collect()
    }

    pub fn signal_scale(&self) -> f64 {
        softplus(self.raw_signal)
    }

    pub fn noise_scale(&self) -> f64 {
        softplus(self.raw_noise)
    }

    pub fn raw_vector(&self) -> Vec<f64> {
        let mut v = self.raw_lengthscales.clone();
        v.push(self.raw_signal);
        v.push(self.raw_noise);
        v
    }

    pub fn constrained_vector(&self) -> Vec<f64> {
        self.raw_vector().into_iter().map(softplus).collect()
    }

    /// Human-readable name of raw coordinate `index`.
    pub fn param_name(&self, index: usize) -> String {
        match index {
            i if i < self.dim() => format!("lengthscale_{i}"),
            i if i == self.dim() => "signal".to_string(),
            _ => "noise".to_string(),
        }
    }
}

/// Symmetric positive definite coefficient matrix `K + σ²I`.
#[derive(Clone, Debug, PartialEq)]
pub struct SystemMatrix(DMatrix<f64>);

impl SystemMatrix {
    /// Wraps an arbitrary dense matrix after checking it is square, finite and
    /// symmetric. Positive definiteness is left to the consumers.
    pub fn from_dense(matrix: DMatrix<f64>) -> Result<Self> {
        if matrix.nrows() != matrix.ncols() {
            return Err(GpError::DimensionMismatch {
                what: "system matrix must be square",
                expected: matrix.nrows(),
                got: matrix.ncols(),
            });
        }
        if matrix.iter().any(|v| !v.is_finite()) {
            return Err(GpError::NonFinite("system matrix"));
        }
        let scale = matrix.amax().max(1.0);
        let n = matrix.nrows();
        for j in 0..n {
            for i in (j + 1)..n {
                if (matrix[(i, j)] - matrix[(j, i)]).abs() > 1e-12 * scale {
                    return Err(GpError::InvalidArgument(format!(
                        "system matrix is not symmetric at ({i}, {j})"
                    )));
                }
            }
        }
        Ok(Self(matrix))
    }

    pub fn n(&self) -> usize {
        self.0.nrows()
    }

    pub fn as_matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn into_inner(self) -> DMatrix<f64> {
        self.0
    }
}

/// `∂H/∂θ_k` for one raw coordinate `k`.
#[derive(Clone, Debug, PartialEq)]
pub struct DerivativeMatrix {
    pub matrix: DMatrix<f64>,
    pub parameter_index: usize,
}

fn check_point(x: &[f64], hyper: &Hyperparameters) -> Result<()> {
    if x.len() != hyper.dim() {
        return Err(GpError::DimensionMismatch {
            what: "input dimension vs lengthscales",
            expected: hyper.dim(),
            got: x.len(),
        });
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(GpError::NonFinite("kernel input"));
    }
    Ok(())
}

fn check_inputs(x: &DMatrix<f64>, hyper: &Hyperparameters) -> Result<()> {
    if x.ncols() != hyper.dim() {
        return Err(GpError::DimensionMismatch {
            what: "input columns vs lengthscales",
            expected: hyper.dim(),
            got: x.ncols(),
        });
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(GpError::NonFinite("kernel inputs"));
    }
    Ok(())
}

/// Evaluates the Matérn-3/2 ARD kernel at a pair of points.
pub fn matern32(x: &[f64], x2: &[f64], hyper: &Hyperparameters) -> Result<f64> {
    check_point(x, hyper)?;
    check_point(x2, hyper)?;
    let r2: f64 = x
        .iter()
        .zip(x2)
        .zip(&hyper.raw_lengthscales)
        .map(|((a, b), &raw)| {
            let u = (a - b) / softplus(raw);
            u * u
        })
        .sum();
    let sf = hyper.signal_scale();
    Ok(matern_profile(sf * sf, r2.sqrt()))
}

#[inline]
fn matern_profile(variance: f64, r: f64) -> f64 {
    let t = SQRT3 * r;
    variance * (1.0 + t) * (-t).exp()
}

/// Row-major copy of `x` with every column divided by its lengthscale.
fn scaled_rows(x: &DMatrix<f64>, lengthscales: &[f64]) -> Vec<f64> {
    let (n, d) = x.shape();
    let mut out = vec![0.0; n * d];
    for i in 0..n {
        for k in 0..d {
            out[i * d + k] = x[(i, k)] / lengthscales[k];
        }
    }
    out
}

#[inline]
fn scaled_distance(u: &[f64], v: &[f64]) -> f64 {
    u.iter()
        .zip(v)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt()
}

/// Cross-covariance `k(a, b)` as an `a.nrows() × b.nrows()` matrix.
pub fn cross_covariance(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    hyper: &Hyperparameters,
) -> Result<DMatrix<f64>> {
    check_inputs(a, hyper)?;
    check_inputs(b, hyper)?;
    let ls = hyper.lengthscales();
    let d = hyper.dim();
    let ua = scaled_rows(a, &ls);
    let ub = scaled_rows(b, &ls);
    let sf = hyper.signal_scale();
    let var = sf * sf;
    Ok(DMatrix::from_fn(a.nrows(), b.nrows(), |i, j| {
        matern_profile(
            var,
            scaled_distance(&ua[i * d..(i + 1) * d], &ub[j * d..(j + 1) * d]),
        )
    }))
}

/// Assembles `H = k(X, X) + σ²I`.
pub fn system_matrix(x: &DMatrix<f64>, hyper: &Hyperparameters) -> Result<SystemMatrix> {
    check_inputs(x, hyper)?;
    let n = x.nrows();
    if n == 0 {
        return Err(GpError::InvalidArgument("system matrix needs n >= 1".into()));
    }
    let d = hyper.dim();
    let u = scaled_rows(x, &hyper.lengthscales());
    let sf = hyper.signal_scale();
    let var = sf * sf;
    let noise = hyper.noise_scale();
    let mut h = DMatrix::zeros(n, n);
    for j in 0..n {
        let uj = &u[j * d..(j + 1) * d];
        h[(j, j)] = var + noise * noise;
        for i in (j + 1)..n {
            h[(i, j)] = matern_profile(var, scaled_distance(&u[i * d..(i + 1) * d], uj));
        }
    }
    h.fill_upper_triangle_with_lower_triangle();
    Ok(SystemMatrix(h))
}

/// Per-pair derivative factors shared by the dense and contracted paths.
struct DerivativeFactors {
    /// `3 s_f² σ'(raw_ℓk) / ℓ_k`, multiplied by `exp(-√3 r) Δu_k²`.
    lengthscale: Vec<f64>,
    /// `2 s_f σ'(raw_signal)`, multiplied by `(1 + √3 r) exp(-√3 r)`.
    signal: f64,
    /// `2 σ σ'(raw_noise)` on the diagonal.
    noise: f64,
}

impl DerivativeFactors {
    fn new(hyper: &Hyperparameters) -> Self {
        let sf = hyper.signal_scale();
        let lengthscale = hyper
            .raw_lengthscales
            .iter()
            .map(|&raw| 3.0 * sf * sf * softplus_derivative(raw) / softplus(raw))
            .collect();
        Self {
            lengthscale,
            signal: 2.0 * sf * softplus_derivative(hyper.raw_signal),
            noise: 2.0 * hyper.noise_scale() * softplus_derivative(hyper.raw_noise),
        }
    }
}

/// Dense `∂H/∂θ_k` for every raw coordinate.
///
/// Memory is `(d + 2) n²`; for large problems prefer
/// [`contract_derivatives`], which never stores these matrices.
pub fn derivative_matrices(
    x: &DMatrix<f64>,
    hyper: &Hyperparameters,
) -> Result<Vec<DerivativeMatrix>> {
    check_inputs(x, hyper)?;
    let n = x.nrows();
    if n == 0 {
        return Err(GpError::InvalidArgument("system matrix needs n >= 1".into()));
    }
    let d = hyper.dim();
    let u = scaled_rows(x, &hyper.lengthscales());
    let f = DerivativeFactors::new(hyper);
    let mut mats: Vec<DMatrix<f64>> = (0..d + 2).map(|_| DMatrix::zeros(n, n)).collect();
    for j in 0..n {
        let uj = &u[j * d..(j + 1) * d];
        mats[d][(j, j)] = f.signal;
        mats[d + 1][(j, j)] = f.noise;
        for i in (j + 1)..n {
            let ui = &u[i * d..(i + 1) * d];
            let t = SQRT3 * scaled_distance(ui, uj);
            let e = (-t).exp();
            for k in 0..d {
                let du = ui[k] - uj[k];
                let v = f.lengthscale[k] * e * du * du;
                mats[k][(i, j)] = v;
                mats[k][(j, i)] = v;
            }
            let v = f.signal * (1.0 + t) * e;
            mats[d][(i, j)] = v;
            mats[d][(j, i)] = v;
        }
    }
    Ok(mats
        .into_iter()
        .enumerate()
        .map(|(parameter_index, matrix)| DerivativeMatrix {
            matrix,
            parameter_index,
        })
        .collect())
}

/// Computes `Σ_ab ∂H_k(a, b) W(a, b)` for every raw coordinate `k` and every
/// weight matrix `W`, without storing the derivative matrices.
///
/// With `E = exp(-√3 r)` and `M = W ∘ E`, the lengthscale sums expand to
/// `Σ_a u_ak² (M1 + Mᵀ1)_a - 2 u_kᵀ M u_k`, so each weight costs one
/// Hadamard product and one `n × n × d` product. Returns one vector of
/// length `d + 2` per weight matrix.
pub fn contract_derivatives(
    x: &DMatrix<f64>,
    hyper: &Hyperparameters,
    weights: &[&DMatrix<f64>],
) -> Result<Vec<Vec<f64>>> {
    check_inputs(x, hyper)?;
    let n = x.nrows();
    for w in weights {
        if w.shape() != (n, n) {
            return Err(GpError::DimensionMismatch {
                what: "contraction weight rows",
                expected: n,
                got: w.nrows(),
            });
        }
    }
    let d = hyper.dim();
    let ls = hyper.lengthscales();
    let u = scaled_rows(x, &ls);
    // centred scaled inputs; differences are unchanged and cancellation shrinks
    let mut uc = DMatrix::from_fn(n, d, |i, k| u[i * d + k]);
    for mut col in uc.column_iter_mut() {
        let mean = col.mean();
        col.add_scalar_mut(-mean);
    }
    let uc2 = uc.map(|v| v * v);

    let mut decay = DMatrix::<f64>::zeros(n, n);
    let mut profile = DMatrix::<f64>::zeros(n, n);
    for j in 0..n {
        let uj = &u[j * d..(j + 1) * d];
        decay[(j, j)] = 1.0;
        profile[(j, j)] = 1.0;
        for i in (j + 1)..n {
            let t = SQRT3 * scaled_distance(&u[i * d..(i + 1) * d], uj);
            let e = (-t).exp();
            decay[(i, j)] = e;
            profile[(i, j)] = (1.0 + t) * e;
        }
    }
    decay.fill_upper_triangle_with_lower_triangle();
    profile.fill_upper_triangle_with_lower_triangle();

    let f = DerivativeFactors::new(hyper);
    let ones = DVector::from_element(n, 1.0);
    Ok(weights
        .iter()
        .map(|w| {
            let m = w.component_mul(&decay);
            let sums = &m * &ones + m.tr_mul(&ones);
            let mu = &m * &uc;
            let mut out: Vec<f64> = (0..d)
                .map(|k| {
                    let spread = uc2.column(k).dot(&sums) - 2.0 * uc.column(k).dot(&mu.column(k));
                    f.lengthscale[k] * spread
                })
                .collect();
            out.push(f.signal * w.dot(&profile));
            out.push(f.noise * w.trace());
            out
        })
        .collect())
}
