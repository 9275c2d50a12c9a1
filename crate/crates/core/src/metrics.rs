//! Per-iteration training metrics and their line-delimited JSON format.

use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const METRICS_SCHEMA_VERSION: u32 = 1;

/// One record per trainer iteration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub schema_version: u32,
    /// 1-based stage index `s`.
    pub stage: usize,
    /// 1-based iteration index `k` within the stage.
    pub iteration: usize,
    /// 1-based iteration count across stages.
    pub global_iteration: usize,
    /// Exact expected reward of the policy after the update, weighted by the
    /// prompt distribution.
    pub mean_reward: f64,
    /// Mean reward of the sampled groups.
    pub sampled_reward: f64,
    /// Sampled objective at the first inner step.
    pub objective: f64,
    pub mean_abs_advantage: f64,
    /// `E_x TV(theta, theta_old)` when the batch was drawn.
    pub staleness_tv: f64,
    /// `E_x KL(theta || theta_old)` when the batch was drawn.
    pub staleness_kl: f64,
    pub masked_fraction: f64,
    pub bound_slack: Option<f64>,
    pub pass_at_1: Option<f64>,
    /// Seconds since the run started; only recorded on request so metrics
    /// files stay byte-reproducible by default.
    pub wall_time: Option<f64>,
}

/// Names of the numeric metrics, in file order.
pub const METRIC_NAMES: [&str; 10] = [
    "mean_reward",
    "sampled_reward",
    "objective",
    "mean_abs_advantage",
    "staleness_tv",
    "staleness_kl",
    "masked_fraction",
    "bound_slack",
    "pass_at_1",
    "wall_time",
];

impl MetricsRecord {
    /// Looks up a numeric metric by name; `None` when absent for this record.
    pub fn metric(&self, name: &str) -> Option<f64> {
        match name {
            "mean_reward" => Some(self.mean_reward),
            "sampled_reward" => Some(self.sampled_reward),
            "objective" => Some(self.objective),
            "mean_abs_advantage" => Some(self.mean_abs_advantage),
            "staleness_tv" => Some(self.staleness_tv),
            "staleness_kl" => Some(self.staleness_kl),
            "masked_fraction" => Some(self.masked_fraction),
            "bound_slack" => self.bound_slack,
            "pass_at_1" => self.pass_at_1,
            "wall_time" => self.wall_time,
            _ => None,
        }
    }

    pub fn to_json_line(&self) -> Result<String> {
        serde_json::to_string(self).map_err(|e| Error::Format(e.to_string()))
    }
}

pub fn write_record(out: &mut impl Write, record: &MetricsRecord) -> std::io::Result<()> {
    let line = record.to_json_line().map_err(std::io::Error::other)?;
    writeln!(out, "{line}")
}

/// Reads a metrics file, rejecting unknown schema versions and out-of-order
/// records.
pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRecord>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut records: Vec<MetricsRecord> = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let value: serde_json::Value =
            serde_json::from_str(&line).map_err(|e| Error::Format(format!("{}:{}: {e}", path.display(), n + 1)))?;
        match value.get("schema_version").and_then(|v| v.as_u64()) {
            Some(v) if v == u64::from(METRICS_SCHEMA_VERSION) => {}
            other => {
                return Err(Error::Format(format!(
                    "{}:{}: unsupported metrics schema version {other:?} (expected {METRICS_SCHEMA_VERSION})",
                    path.display(),
                    n + 1
                )))
            }
        }
        let record: MetricsRecord =
            serde_json::from_value(value).map_err(|e| Error::Format(format!("{}:{}: {e}", path.display(), n + 1)))?;
        if let Some(prev) = records.last() {
            if (record.stage, record.iteration) <= (prev.stage, prev.iteration) {
                return Err(Error::Format(format!(
                    "{}:{}: records out of order",
                    path.display(),
                    n + 1
                )));
            }
        }
        records.push(record);
    }
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn sample(stage: usize, iteration: usize) -> MetricsRecord {
        MetricsRecord {
            schema_version: METRICS_SCHEMA_VERSION,
            stage,
            iteration,
            global_iteration: iteration,
            mean_reward: 0.1 + iteration as f64 / 3.0,
            sampled_reward: 0.5,
            objective: -1e-17,
            mean_abs_advantage: 0.8,
            staleness_tv: 0.0,
            staleness_kl: 0.0,
            masked_fraction: 0.25,
            bound_slack: None,
            pass_at_1: Some(0.5),
            wall_time: None,
        }
    }

    #[test]
    fn round_trip_and_version_check() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.jsonl");
        let mut buf = Vec::new();
        for k in 1..=3 {
            write_record(&mut buf, &sample(1, k)).unwrap();
        }
        std::fs::write(&path, &buf).unwrap();
        let back = read_metrics(&path).unwrap();
        assert_eq!(back, (1..=3).map(|k| sample(1, k)).collect::<Vec<_>>());
        assert_eq!(back[0].metric("pass_at_1"), Some(0.5));
        assert_eq!(back[0].metric("bound_slack"), None);

        let text = String::from_utf8(buf)
            .unwrap()
            .replace("\"schema_version\":1", "\"schema_version\":7");
        std::fs::write(&path, text).unwrap();
        assert!(read_metrics(&path).unwrap_err().to_string().contains("schema version"));
    }

    #[test]
    fn rejects_out_of_order() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.jsonl");
        let mut buf = Vec::new();
        write_record(&mut buf, &sample(1, 2)).unwrap();
        write_record(&mut buf, &sample(1, 1)).unwrap();
        std::fs::write(&path, &buf).unwrap();
        assert!(read_metrics(&path).is_err());
    }
}
