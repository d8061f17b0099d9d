use std::fmt;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::experiment::{ExperimentReport, LrSearch};
use crate::bounds::BoundReport;
use crate::error::{GpError, Result};
use crate::optimizer::OptTrace;

/// Keys holding wall-clock measurements, the only fields allowed to differ
/// between repeated runs.
pub const WALL_TIME_FIELDS: &[&str] = &[
    "total_runtime",
    "solver_runtime",
    "speed_up",
    "solver_seconds",
    "cumulative_seconds",
    "total_seconds",
];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReportFormat {
    Json,
    Csv,
}

impl fmt::Display for ReportFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ReportFormat::Json => "json",
            ReportFormat::Csv => "csv",
        })
    }
}

impl FromStr for ReportFormat {
    type Err = GpError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "json" => Ok(ReportFormat::Json),
            "csv" => Ok(ReportFormat::Csv),
            other => Err(GpError::InvalidArgument(format!(
                "unknown format '{other}' (expected json or csv)"
            ))),
        }
    }
}

/// A report that also has a flat tabular form.
pub trait Tabular {
    fn header(&self) -> Vec<String>;
    fn rows(&self) -> Vec<Vec<String>>;
}

/// Seventeen significant digits, enough to round-trip any `f64`.
pub fn format_float(v: f64) -> String {
    if v.is_finite() {
        format!("{v:.16e}")
    } else {
        v.to_string()
    }
}

fn opt_float(v: Option<f64>) -> String {
    v.map(format_float).unwrap_or_default()
}

fn join_floats(v: &[f64]) -> String {
    v.iter().map(|x| format_float(*x)).collect::<Vec<_>>().join(";")
}

/// Flat row of [`ExperimentReport`]'s CSV form, one per (config, split).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitRow {
    pub dataset: String,
    pub config: String,
    pub split: usize,
    pub split_seed: u64,
    pub train_seed: u64,
    pub test_rmse: f64,
    pub test_llh: f64,
    pub total_runtime: f64,
    pub solver_runtime: f64,
    pub total_iterations: usize,
}

impl Tabular for ExperimentReport {
    fn header(&self) -> Vec<String> {
        [
            "dataset",
            "config",
            "split",
            "split_seed",
            "train_seed",
            "test_rmse",
            "test_llh",
            "total_runtime",
            "solver_runtime",
            "total_iterations",
        ]
        .map(String::from)
        .to_vec()
    }

    fn rows(&self) -> Vec<Vec<String>> {
        let mut out = Vec::new();
        for r in &self.results {
            for s in &r.splits {
                out.push(vec![
                    r.dataset.clone(),
                    r.label(),
                    s.split.to_string(),
                    s.split_seed.to_string(),
                    s.train_seed.to_string(),
                    format_float(s.test_rmse),
                    format_float(s.test_llh),
                    format_float(s.total_runtime),
                    format_float(s.solver_runtime),
                    s.total_iterations.to_string(),
                ]);
            }
        }
        out
    }
}

impl Tabular for OptTrace {
    fn header(&self) -> Vec<String> {
        let p = self.final_hyper.num_params();
        let mut h: Vec<String> = ["step", "iterations", "solver_seconds", "cumulative_seconds", "converged"]
            .map(String::from)
            .to_vec();
        for prefix in ["raw", "constrained", "gradient"] {
            h.extend((0..p).map(|k| format!("{prefix}_{}", self.final_hyper.param_name(k))));
        }
        h.push("final_relative_residuals".into());
        h
    }

    fn rows(&self) -> Vec<Vec<String>> {
        self.steps
            .iter()
            .map(|s| {
                let mut row = vec![
                    s.step.to_string(),
                    s.iterations.to_string(),
                    format_float(s.solver_seconds),
                    format_float(s.cumulative_seconds),
                    s.converged.to_string(),
                ];
                for v in [&s.raw, &s.constrained, &s.gradient.values] {
                    row.extend(v.iter().map(|x| format_float(*x)));
                }
                row.push(join_floats(&s.final_relative_residuals));
                row
            })
            .collect()
    }
}

impl Tabular for Vec<BoundReport> {
    fn header(&self) -> Vec<String> {
        [
            "n",
            "s",
            "distribution",
            "trials",
            "seed",
            "empirical_mean",
            "theoretical_value",
            "standard_error",
            "z_score",
        ]
        .map(String::from)
        .to_vec()
    }

    fn rows(&self) -> Vec<Vec<String>> {
        self.iter()
            .map(|r| {
                vec![
                    r.n.to_string(),
                    r.s.to_string(),
                    serde_json::to_value(r.distribution)
                        .ok()
                        .and_then(|v| v.as_str().map(String::from))
                        .unwrap_or_default(),
                    r.trials.to_string(),
                    r.seed.to_string(),
                    format_float(r.empirical_mean),
                    format_float(r.theoretical_value),
                    format_float(r.standard_error),
                    format_float(r.z_score),
                ]
            })
            .collect()
    }
}

impl Tabular for LrSearch {
    fn header(&self) -> Vec<String> {
        ["learning_rate", "relative_residual", "chosen"].map(String::from).to_vec()
    }

    fn rows(&self) -> Vec<Vec<String>> {
        self.candidates
            .iter()
            .map(|c| {
                vec![
                    format_float(c.learning_rate),
                    opt_float(c.relative_residual),
                    (c.learning_rate == self.chosen).to_string(),
                ]
            })
            .collect()
    }
}

/// Writes `value` as pretty JSON or as its flat CSV table.
pub fn emit_report<T>(value: &T, path: &Path, format: ReportFormat) -> Result<()>
where
    T: Serialize + Tabular,
{
    let mut out = BufWriter::new(File::create(path)?);
    write_report(value, &mut out, format)?;
    out.flush()?;
    Ok(())
}

/// [`emit_report`] into any writer.
pub fn write_report<T, W>(value: &T, out: &mut W, format: ReportFormat) -> Result<()>
where
    T: Serialize + Tabular,
    W: Write,
{
    match format {
        ReportFormat::Json => {
            serde_json::to_writer_pretty(&mut *out, value)?;
            out.write_all(b"\n")?;
        }
        ReportFormat::Csv => {
            let mut w = csv::Writer::from_writer(&mut *out);
            w.write_record(value.header())?;
            for row in value.rows() {
                w.write_record(row)?;
            }
            w.flush()?;
        }
    }
    Ok(())
}

pub fn load_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let file = File::open(path)?;
    Ok(serde_json::from_reader(std::io::BufReader::new(file))?)
}

/// Reads the CSV form of an [`ExperimentReport`].
pub fn load_split_rows(path: &Path) -> Result<Vec<SplitRow>> {
    let mut reader = csv::Reader::from_path(path)?;
    reader
        .deserialize()
        .map(|r| r.map_err(GpError::from))
        .collect()
}

/// Removes every [`WALL_TIME_FIELDS`] key from a JSON tree.
pub fn strip_wall_times(value: &mut serde_json::Value) {
    match value {
        serde_json::Value::Object(map) => {
            map.retain(|k, _| !WALL_TIME_FIELDS.contains(&k.as_str()));
            map.values_mut().for_each(strip_wall_times);
        }
        serde_json::Value::Array(items) => items.iter_mut().for_each(strip_wall_times),
        _ => {}
    }
}

/// Sets every [`WALL_TIME_FIELDS`] number to zero, keeping the key layout.
pub fn zero_wall_times(value: &mut serde_json::Value) {
    match value {
        serde_json::Value::Object(map) => {
            for (k, v) in map.iter_mut() {
                if WALL_TIME_FIELDS.contains(&k.as_str()) {
                    zero_numbers(v);
                } else {
                    zero_wall_times(v);
                }
            }
        }
        serde_json::Value::Array(items) => items.iter_mut().for_each(zero_wall_times),
        _ => {}
    }
}

fn zero_numbers(value: &mut serde_json::Value) {
    match value {
        serde_json::Value::Number(_) => *value = serde_json::json!(0.0),
        serde_json::Value::Object(map) => map.values_mut().for_each(zero_numbers),
        serde_json::Value::Array(items) => items.iter_mut().for_each(zero_numbers),
        _ => {}
    }
}
