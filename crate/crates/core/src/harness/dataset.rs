use std::path::Path;

use nalgebra::{Cholesky, DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{GpError, Result};
use crate::exact::{TargetScaling, DENSE_LIMIT};
use crate::kernel::{system_matrix, Hyperparameters};
use crate::rng::{seeded, stream_rng};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitDescriptor {
    pub seed: u64,
    pub train_fraction: f64,
}

/// A regression dataset together with the affine maps that produced it.
///
/// Freshly loaded or synthesised data carries identity scaling (means 0,
/// stds 1). After [`split_standardize`] both halves carry the train-split
/// statistics, so `original = standardized * std + mean`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Dataset {
    pub name: String,
    #[serde(skip)]
    pub x: DMatrix<f64>,
    #[serde(skip)]
    pub y: DVector<f64>,
    pub feature_means: Vec<f64>,
    pub feature_stds: Vec<f64>,
    pub target_mean: f64,
    pub target_std: f64,
    pub split: Option<SplitDescriptor>,
}

impl Dataset {
    pub fn new(name: impl Into<String>, x: DMatrix<f64>, y: DVector<f64>) -> Result<Self> {
        if x.nrows() != y.len() {
            return Err(GpError::DimensionMismatch {
                what: "targets vs inputs",
                expected: x.nrows(),
                got: y.len(),
            });
        }
        if x.iter().chain(y.iter()).any(|v| !v.is_finite()) {
            return Err(GpError::NonFinite("dataset"));
        }
        let d = x.ncols();
        Ok(Self {
            name: name.into(),
            x,
            y,
            feature_means: vec![0.0; d],
            feature_stds: vec![1.0; d],
            target_mean: 0.0,
            target_std: 1.0,
            split: None,
        })
    }

    pub fn n(&self) -> usize {
        self.x.nrows()
    }

    pub fn dim(&self) -> usize {
        self.x.ncols()
    }

    pub fn target_scaling(&self) -> TargetScaling {
        TargetScaling {
            mean: self.target_mean,
            std: self.target_std,
        }
    }

    /// Inputs and targets mapped back to original units.
    pub fn destandardized(&self) -> (DMatrix<f64>, DVector<f64>) {
        let mut x = self.x.clone();
        for (j, mut col) in x.column_iter_mut().enumerate() {
            col.iter_mut()
                .for_each(|v| *v = *v * self.feature_stds[j] + self.feature_means[j]);
        }
        let y = self.y.map(|v| v * self.target_std + self.target_mean);
        (x, y)
    }
}

/// Rows kept and rejected while reading a CSV file.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LoadReport {
    pub rows_read: usize,
    pub rows_kept: usize,
    /// 1-based file line numbers of rows dropped for missing or non-finite values.
    pub rejected_lines: Vec<u64>,
    pub warnings: Vec<String>,
}

/// Reads a headed, comma-separated numeric file. `target_column` names the
/// regression target; `None` selects the last column.
pub fn load_csv(path: &Path, target_column: Option<&str>) -> Result<(Dataset, LoadReport)> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| GpError::from(e).context(path.display().to_string()))?;
    let headers = reader.headers()?.clone();
    if headers.is_empty() || headers.len() < 2 {
        return Err(GpError::Parse {
            line: 1,
            message: "need a header with at least two columns".into(),
        });
    }
    let target = match target_column {
        Some(name) => headers.iter().position(|h| h == name).ok_or_else(|| {
            GpError::InvalidArgument(format!(
                "target column '{name}' not found (columns: {})",
                headers.iter().collect::<Vec<_>>().join(", ")
            ))
        })?,
        None => headers.len() - 1,
    };

    let mut report = LoadReport::default();
    let mut features: Vec<f64> = Vec::new();
    let mut targets: Vec<f64> = Vec::new();
    let mut record = csv::StringRecord::new();
    loop {
        let more = reader.read_record(&mut record).map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            if e.is_io_error() {
                GpError::Csv(e)
            } else {
                GpError::Parse {
                    line,
                    message: e.to_string(),
                }
            }
        })?;
        if !more {
            break;
        }
        let line = record.position().map_or(0, |p| p.line());
        report.rows_read += 1;
        let mut row = Vec::with_capacity(record.len());
        let mut finite = true;
        for field in record.iter() {
            if field.is_empty() {
                finite = false;
                row.push(f64::NAN);
                continue;
            }
            let v: f64 = field.parse().map_err(|_| GpError::Parse {
                line,
                message: format!("'{field}' is not a number"),
            })?;
            finite &= v.is_finite();
            row.push(v);
        }
        if !finite {
            report.rejected_lines.push(line);
            continue;
        }
        for (j, v) in row.into_iter().enumerate() {
            if j == target {
                targets.push(v);
            } else {
                features.push(v);
            }
        }
    }

    if !report.rejected_lines.is_empty() {
        report.warnings.push(format!(
            "dropped {} row(s) with missing or non-finite values",
            report.rejected_lines.len()
        ));
    }
    let n = targets.len();
    report.rows_kept = n;
    if n < 2 {
        return Err(GpError::InvalidArgument(format!(
            "need at least 2 usable rows, found {n}"
        )));
    }
    if targets.iter().all(|v| *v == targets[0]) {
        return Err(GpError::InvalidArgument("target column is constant".into()));
    }
    let d = headers.len() - 1;
    let x = DMatrix::from_row_slice(n, d, &features);
    let y = DVector::from_vec(targets);
    let name = path
        .file_stem()
        .map_or_else(|| "data".to_string(), |s| s.to_string_lossy().into_owned());
    Ok((Dataset::new(name, x, y)?, report))
}

/// Mean and population standard deviation; near-zero spread maps to 1.
fn moments(values: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let n = values.clone().count() as f64;
    let mean = values.clone().sum::<f64>() / n;
    let var = values.map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let std = var.sqrt();
    if std <= 1e-12 * mean.abs().max(1.0) {
        (mean, 1.0)
    } else {
        (mean, std)
    }
}

/// Shuffles with `split_seed`, cuts off `round(train_fraction · n)` training
/// rows, and z-scores features and target with training statistics.
pub fn split_standardize(
    ds: &Dataset,
    train_fraction: f64,
    split_seed: u64,
) -> Result<(Dataset, Dataset)> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(GpError::InvalidArgument(format!(
            "train_fraction must lie in (0, 1), got {train_fraction}"
        )));
    }
    let n = ds.n();
    let n_train = (train_fraction * n as f64).round() as usize;
    if n_train == 0 || n_train >= n {
        return Err(GpError::InvalidArgument(format!(
            "split of {n} rows at fraction {train_fraction} leaves an empty side"
        )));
    }
    let (x_orig, y_orig) = ds.destandardized();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut seeded(split_seed));
    let (train_idx, test_idx) = order.split_at(n_train);

    let d = ds.dim();
    let mut means = Vec::with_capacity(d);
    let mut stds = Vec::with_capacity(d);
    for j in 0..d {
        let (m, s) = moments(train_idx.iter().map(|&i| x_orig[(i, j)]));
        means.push(m);
        stds.push(s);
    }
    let (y_mean, y_std) = moments(train_idx.iter().map(|&i| y_orig[i]));

    let build = |idx: &[usize], suffix: &str| -> Dataset {
        let x = DMatrix::from_fn(idx.len(), d, |r, j| (x_orig[(idx[r], j)] - means[j]) / stds[j]);
        let y = DVector::from_fn(idx.len(), |r, _| (y_orig[idx[r]] - y_mean) / y_std);
        Dataset {
            name: format!("{}{suffix}", ds.name),
            x,
            y,
            feature_means: means.clone(),
            feature_stds: stds.clone(),
            target_mean: y_mean,
            target_std: y_std,
            split: Some(SplitDescriptor {
                seed: split_seed,
                train_fraction,
            }),
        }
    };
    Ok((build(train_idx, "/train"), build(test_idx, "/test")))
}

/// Keeps a random `max_rows` rows (in their original order) when `ds` is
/// larger; otherwise returns a copy. Scaling metadata is carried over.
pub fn subsample(ds: &Dataset, max_rows: usize, seed: u64) -> Result<Dataset> {
    if max_rows == 0 {
        return Err(GpError::InvalidArgument("max_rows must be at least 1".into()));
    }
    if ds.n() <= max_rows {
        return Ok(ds.clone());
    }
    let mut order: Vec<usize> = (0..ds.n()).collect();
    order.shuffle(&mut seeded(seed));
    let mut keep = order[..max_rows].to_vec();
    keep.sort_unstable();
    Ok(Dataset {
        name: format!("{}/sub{max_rows}", ds.name),
        x: ds.x.select_rows(&keep),
        y: ds.y.select_rows(&keep),
        ..ds.clone()
    })
}

/// [`split_standardize`], then [`subsample`] of the training side to
/// [`DENSE_LIMIT`] rows so that exact prediction stays feasible.
pub fn split_for_training(
    ds: &Dataset,
    train_fraction: f64,
    split_seed: u64,
) -> Result<(Dataset, Dataset)> {
    let (train, test) = split_standardize(ds, train_fraction, split_seed)?;
    Ok((subsample(&train, DENSE_LIMIT, split_seed)?, test))
}

/// Draws `X ~ U[0,1]^{n×d}` and `y ~ N(0, K + σ²I)` at `truth`, with
/// `d = truth.dim()`.
pub fn synthesize(n: usize, truth: &Hyperparameters, seed: u64) -> Result<Dataset> {
    if n == 0 {
        return Err(GpError::InvalidArgument("n must be at least 1".into()));
    }
    if n > DENSE_LIMIT {
        return Err(GpError::TooLarge {
            n,
            limit: DENSE_LIMIT,
        });
    }
    let d = truth.dim();
    let mut rng = stream_rng(seed, 0);
    let x = DMatrix::from_fn(n, d, |_, _| rng.random::<f64>());
    let h = system_matrix(&x, truth)?;
    let chol = Cholesky::new(h.into_inner()).ok_or_else(|| {
        GpError::NotPositiveDefinite("covariance of the synthetic draw".into())
    })?;
    let mut rng = stream_rng(seed, 1);
    let eps = DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal));
    let y = chol.l() * eps;
    Dataset::new(format!("synthetic-n{n}-d{d}-s{seed}"), x, y)
}

/// Ground truth used for `--synthetic` data: the first few inputs matter
/// with lengthscales between 0.5 and 1.2, the rest are nearly irrelevant.
pub fn default_truth(d: usize) -> Result<Hyperparameters> {
    let relevant = [0.5, 0.7, 0.9, 1.2];
    let lengthscales: Vec<f64> = (0..d)
        .map(|k| relevant.get(k).copied().unwrap_or(20.0))
        .collect();
    Hyperparameters::from_constrained(&lengthscales, 1.0, 0.3)
}
