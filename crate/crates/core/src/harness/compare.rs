//! Min/max/median/mean of one metric across runs.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::metrics::{read_metrics, METRIC_NAMES};

use super::run::METRICS_FILE;

#[derive(Debug, Clone, PartialEq)]
pub struct RunStats {
    pub run: String,
    pub count: usize,
    pub min: f64,
    pub max: f64,
    pub median: f64,
    pub mean: f64,
}

/// Summary statistics of a sample; `None` when empty.
pub fn summarize(values: &[f64]) -> Option<(f64, f64, f64, f64)> {
    if values.is_empty() {
        return None;
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    let median = if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    };
    let mean = values.iter().sum::<f64>() / n as f64;
    Some((sorted[0], sorted[n - 1], median, mean))
}

fn metrics_path(dir: &Path) -> PathBuf {
    if dir.is_file() {
        dir.to_path_buf()
    } else {
        dir.join(METRICS_FILE)
    }
}

pub fn compare_runs(dirs: &[PathBuf], metric: &str) -> Result<Vec<RunStats>> {
    if dirs.len() < 2 {
        return Err(Error::Config("compare needs at least two run directories".into()));
    }
    let mut runs = Vec::new();
    let mut shared: Vec<&str> = METRIC_NAMES.to_vec();
    for dir in dirs {
        let records = read_metrics(&metrics_path(dir))?;
        shared.retain(|m| records.iter().any(|r| r.metric(m).is_some()));
        runs.push((dir, records));
    }
    if !shared.contains(&metric) {
        return Err(Error::Config(format!(
            "metric `{metric}` is not present in every run; available: {}",
            shared.join(", ")
        )));
    }
    Ok(runs
        .into_iter()
        .map(|(dir, records)| {
            let values: Vec<f64> = records.iter().filter_map(|r| r.metric(metric)).collect();
            let (min, max, median, mean) = summarize(&values).expect("metric present");
            RunStats {
                run: dir.display().to_string(),
                count: values.len(),
                min,
                max,
                median,
                mean,
            }
        })
        .collect())
}

pub fn format_table(metric: &str, rows: &[RunStats]) -> String {
    let width = rows.iter().map(|r| r.run.len()).max().unwrap_or(3).max(3);
    let mut out = String::new();
    let _ = writeln!(out, "metric: {metric}");
    let _ = writeln!(
        out,
        "{:<width$}  {:>6}  {:>12}  {:>12}  {:>12}  {:>12}",
        "run", "n", "min", "max", "median", "mean"
    );
    for r in rows {
        let _ = writeln!(
            out,
            "{:<width$}  {:>6}  {:>12.6}  {:>12.6}  {:>12.6}  {:>12.6}",
            r.run, r.count, r.min, r.max, r.median, r.mean
        );
    }
    out
}
