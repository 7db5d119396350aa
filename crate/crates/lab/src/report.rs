//! Run logs and metric reports on disk.
//!
//! The unlearning run log is a CSV of per-epoch loss components plus the
//! wall time. Metric reports exist in two forms: `report.json` carries the
//! full [`MetricsReport`] including wall-clock time, while `metrics.csv`
//! carries only the deterministic columns — that file is the byte-identity
//! target for scenario reruns.

use std::path::Path;

use serde::{Deserialize, Serialize};
use unlearn_core::judge::MetricsReport;
use unlearn_core::lru::{EpochRecord, UnlearnRunLog};

use crate::error::{LabError, Result};

// ── Run log CSV ──────────────────────────────────────────────────────

pub fn write_run_log(log: &UnlearnRunLog, path: &Path) -> Result<()> {
    let mut text = String::from("epoch,l_img,l_retain,l_forget,l_reg,l_total,wall_seconds\n");
    for (i, e) in log.epochs.iter().enumerate() {
        text.push_str(&format!(
            "{i},{},{},{},{},{},{}\n",
            e.image, e.retain, e.forget, e.reg, e.total, log.wall_seconds
        ));
    }
    std::fs::write(path, text).map_err(|e| LabError::io(path, e))
}

pub fn read_run_log(path: &Path) -> Result<UnlearnRunLog> {
    let text = std::fs::read_to_string(path).map_err(|e| LabError::io(path, e))?;
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| LabError::Usage(format!("{}: empty run log", path.display())))?;
    if !header.starts_with("epoch,") {
        return Err(LabError::Usage(format!(
            "{}: not a run log (header '{header}')",
            path.display()
        )));
    }
    let mut log = UnlearnRunLog::default();
    for (lineno, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 7 {
            return Err(LabError::Usage(format!(
                "{}: line {} has {} fields, expected 7",
                path.display(),
                lineno + 2,
                fields.len()
            )));
        }
        let parse = |s: &str| -> Result<f64> {
            s.parse()
                .map_err(|_| LabError::Usage(format!("{}: bad number '{s}'", path.display())))
        };
        log.epochs.push(EpochRecord {
            image: parse(fields[1])?,
            retain: parse(fields[2])?,
            forget: parse(fields[3])?,
            reg: parse(fields[4])?,
            total: parse(fields[5])?,
        });
        log.wall_seconds = parse(fields[6])?;
    }
    if log.epochs.is_empty() {
        return Err(LabError::Usage(format!(
            "{}: run log has no epoch records",
            path.display()
        )));
    }
    Ok(log)
}

// ── Metrics report ───────────────────────────────────────────────────

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct StoredReport {
    pub retain_clip: f64,
    pub forget_clip: f64,
    pub fid: f64,
    pub detection_rate: f64,
    pub unlearning_time_s: f64,
    pub n_samples: usize,
    pub seeds: Vec<u64>,
}

impl From<&MetricsReport> for StoredReport {
    fn from(r: &MetricsReport) -> Self {
        StoredReport {
            retain_clip: r.retain_clip,
            forget_clip: r.forget_clip,
            fid: r.fid,
            detection_rate: r.detection_rate,
            unlearning_time_s: r.unlearning_time_s,
            n_samples: r.n_samples,
            seeds: r.seeds.clone(),
        }
    }
}

impl From<StoredReport> for MetricsReport {
    fn from(r: StoredReport) -> Self {
        MetricsReport {
            retain_clip: r.retain_clip,
            forget_clip: r.forget_clip,
            fid: r.fid,
            detection_rate: r.detection_rate,
            unlearning_time_s: r.unlearning_time_s,
            n_samples: r.n_samples,
            seeds: r.seeds,
        }
    }
}

/// Full report, including wall time, as JSON.
pub fn write_report_json(report: &MetricsReport, path: &Path) -> Result<()> {
    let stored = StoredReport::from(report);
    let json = serde_json::to_string_pretty(&stored).map_err(|e| LabError::json(path, e))?;
    std::fs::write(path, json).map_err(|e| LabError::io(path, e))
}

pub fn read_report_json(path: &Path) -> Result<MetricsReport> {
    let text = std::fs::read_to_string(path).map_err(|e| LabError::io(path, e))?;
    let stored: StoredReport = serde_json::from_str(&text).map_err(|e| LabError::json(path, e))?;
    Ok(stored.into())
}

pub const METRICS_CSV_HEADER: &str = "label,retain_clip,forget_clip,fid,detection_rate,n_samples";

/// One deterministic CSV row (wall time deliberately excluded; it lives in
/// the JSON report).
pub fn metrics_csv_row(label: &str, report: &MetricsReport) -> String {
    format!(
        "{label},{},{},{},{},{}",
        report.retain_clip, report.forget_clip, report.fid, report.detection_rate, report.n_samples
    )
}

/// Write the deterministic metric CSV for a set of labeled reports.
pub fn write_metrics_csv(rows: &[(String, MetricsReport)], path: &Path) -> Result<()> {
    let mut text = String::from(METRICS_CSV_HEADER);
    text.push('\n');
    for (label, report) in rows {
        text.push_str(&metrics_csv_row(label, report));
        text.push('\n');
    }
    std::fs::write(path, text).map_err(|e| LabError::io(path, e))
}

// ── Aggregation over seed grids ──────────────────────────────────────

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricAggregate {
    pub metric: String,
    pub mean: f64,
    /// Sample standard deviation across the grid (0 for a single run).
    pub spread: f64,
    pub n_runs: usize,
}

fn mean_and_spread(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Mean and spread per metric over a seed grid of reports.
pub fn aggregate(reports: &[MetricsReport]) -> Vec<MetricAggregate> {
    let columns: [(&str, fn(&MetricsReport) -> f64); 5] = [
        ("retain_clip", |r| r.retain_clip),
        ("forget_clip", |r| r.forget_clip),
        ("fid", |r| r.fid),
        ("detection_rate", |r| r.detection_rate),
        ("unlearning_time_s", |r| r.unlearning_time_s),
    ];
    columns
        .iter()
        .map(|(name, get)| {
            let values: Vec<f64> = reports.iter().map(get).collect();
            let (mean, spread) = mean_and_spread(&values);
            MetricAggregate {
                metric: name.to_string(),
                mean,
                spread,
                n_runs: reports.len(),
            }
        })
        .collect()
}

pub fn write_aggregate_csv(aggregates: &[MetricAggregate], path: &Path) -> Result<()> {
    let mut text = String::from("metric,mean,spread,n_runs\n");
    for a in aggregates {
        text.push_str(&format!("{},{},{},{}\n", a.metric, a.mean, a.spread, a.n_runs));
    }
    std::fs::write(path, text).map_err(|e| LabError::io(path, e))
}
