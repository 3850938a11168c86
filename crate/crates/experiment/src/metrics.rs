//! Metrics files: per-tick rows, per-run summaries and the summary table.
//!
//! Each file starts with a `# schema=<name>` line followed by a CSV header.

use std::collections::BTreeMap;
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use blendnav_core::sim::{RunMetrics, TickRecord};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::Cell;

pub const TICKS_SCHEMA: &str = "blendnav-ticks/1";
pub const SUMMARY_SCHEMA: &str = "blendnav-summary/1";
pub const TABLE_SCHEMA: &str = "blendnav-table/1";

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("{path}: {source}")]
    Io { path: String, source: io::Error },
    #[error("{path}: {message}")]
    Csv { path: String, message: String },
    #[error("{path}: schema mismatch: expected {expected}, found {found:?}")]
    Schema { path: String, expected: String, found: String },
    #[error("no summary files in {0}")]
    Empty(String),
}

fn io_err(path: &Path) -> impl Fn(io::Error) -> MetricsError + '_ {
    move |source| MetricsError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn csv_err(path: &Path) -> impl Fn(csv::Error) -> MetricsError + '_ {
    move |e| MetricsError::Csv {
        path: path.display().to_string(),
        message: e.to_string(),
    }
}

/// One per-tick CSV row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TickRow {
    pub seed: u64,
    pub tick: u64,
    pub time: f64,
    pub x: f64,
    pub y: f64,
    pub theta: f64,
    pub operator_weight: f64,
    pub robot_weight: f64,
    pub operator_std: Option<f64>,
    pub commanded_vx: Option<f64>,
    pub commanded_vy: Option<f64>,
    pub executed_vx: f64,
    pub executed_vy: f64,
    pub tracking_error: Option<f64>,
    pub min_clearance: Option<f64>,
    pub staleness_s: Option<f64>,
    pub fallback: bool,
}

impl TickRow {
    pub fn new(seed: u64, r: &TickRecord) -> Self {
        Self {
            seed,
            tick: r.tick,
            time: r.time,
            x: r.x,
            y: r.y,
            theta: r.theta,
            operator_weight: r.operator_weight,
            robot_weight: r.robot_weight,
            operator_std: r.operator_std,
            commanded_vx: r.commanded.map(|c| c[0]),
            commanded_vy: r.commanded.map(|c| c[1]),
            executed_vx: r.executed[0],
            executed_vy: r.executed[1],
            tracking_error: r.tracking_error,
            min_clearance: r.min_clearance,
            staleness_s: r.staleness_s,
            fallback: r.fallback,
        }
    }
}

/// One run's summary row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub cell: usize,
    pub drop_probability: f64,
    pub base_delay_s: f64,
    pub seed: u64,
    pub ticks: u64,
    pub completed: bool,
    pub completion_tick: Option<u64>,
    pub path_length: f64,
    pub mean_clearance: Option<f64>,
    pub min_clearance: Option<f64>,
    pub mean_operator_weight: f64,
    pub mean_tracking_error: Option<f64>,
    pub fallback_ticks: u64,
    pub failed: bool,
}

impl SummaryRow {
    pub fn new(cell: &Cell, seed: u64, m: &RunMetrics) -> Self {
        let s = &m.summary;
        Self {
            cell: cell.index,
            drop_probability: cell.drop_probability,
            base_delay_s: cell.base_delay_s,
            seed,
            ticks: s.ticks,
            completed: s.completed,
            completion_tick: s.completion_tick,
            path_length: s.path_length,
            mean_clearance: s.mean_clearance,
            min_clearance: s.min_clearance,
            mean_operator_weight: s.mean_operator_weight,
            mean_tracking_error: s.mean_tracking_error,
            fallback_ticks: s.fallback_ticks,
            failed: s.failed,
        }
    }

    /// Numeric metrics averaged by [`summarize`], in column order.
    fn metrics(&self) -> [(&'static str, Option<f64>); 9] {
        [
            ("completed", Some(self.completed as u8 as f64)),
            ("completion_tick", self.completion_tick.map(|t| t as f64)),
            ("path_length", Some(self.path_length)),
            ("mean_clearance", self.mean_clearance),
            ("min_clearance", self.min_clearance),
            ("mean_operator_weight", Some(self.mean_operator_weight)),
            ("mean_tracking_error", self.mean_tracking_error),
            ("fallback_ticks", Some(self.fallback_ticks as f64)),
            ("failed", Some(self.failed as u8 as f64)),
        ]
    }
}

fn write_csv<T: Serialize>(schema: &str, rows: &[T], out: &mut Vec<u8>) -> Result<(), csv::Error> {
    writeln!(out, "# schema={schema}")?;
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn ticks_csv(rows: &[TickRow]) -> Vec<u8> {
    let mut out = Vec::new();
    write_csv(TICKS_SCHEMA, rows, &mut out).expect("in-memory write");
    out
}

pub fn summary_csv(rows: &[SummaryRow]) -> Vec<u8> {
    let mut out = Vec::new();
    write_csv(SUMMARY_SCHEMA, rows, &mut out).expect("in-memory write");
    out
}

pub fn write_file(path: &Path, bytes: &[u8]) -> Result<(), MetricsError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    fs::write(path, bytes).map_err(io_err(path))
}

fn read_csv<T: for<'de> Deserialize<'de>>(path: &Path, schema: &str) -> Result<Vec<T>, MetricsError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let (first, rest) = text.split_once('\n').unwrap_or((&text, ""));
    let found = first.strip_prefix("# schema=").unwrap_or(first).trim_end();
    if found != schema {
        return Err(MetricsError::Schema {
            path: path.display().to_string(),
            expected: schema.into(),
            found: found.into(),
        });
    }
    let mut r = csv::Reader::from_reader(rest.as_bytes());
    r.deserialize().collect::<Result<_, _>>().map_err(csv_err(path))
}

pub fn read_ticks(path: &Path) -> Result<Vec<TickRow>, MetricsError> {
    read_csv(path, TICKS_SCHEMA)
}

pub fn read_summary(path: &Path) -> Result<Vec<SummaryRow>, MetricsError> {
    read_csv(path, SUMMARY_SCHEMA)
}

/// Mean and standard error of one metric over a cell's runs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    /// Runs that reported the metric.
    pub n: usize,
    pub mean: Option<f64>,
    /// `None` with fewer than two values.
    pub std_error: Option<f64>,
}

impl Stat {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len();
        if n == 0 {
            return Self {
                n,
                mean: None,
                std_error: None,
            };
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let std_error = (n > 1).then(|| {
            let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
            (var / n as f64).sqrt()
        });
        Self {
            n,
            mean: Some(mean),
            std_error,
        }
    }
}

/// Per-cell statistics of every summary metric.
#[derive(Debug, Clone, PartialEq)]
pub struct CellSummary {
    pub drop_probability: f64,
    pub base_delay_s: f64,
    pub runs: usize,
    pub metrics: Vec<(&'static str, Stat)>,
}

/// Groups summary rows by cell parameters, ordered by drop then delay, and
/// averages each metric.
pub fn summarize_rows(rows: &[SummaryRow]) -> Vec<CellSummary> {
    let mut cells: BTreeMap<(u64, u64), Vec<&SummaryRow>> = BTreeMap::new();
    for r in rows {
        cells
            .entry((r.drop_probability.to_bits(), r.base_delay_s.to_bits()))
            .or_default()
            .push(r);
    }
    let mut out: Vec<CellSummary> = cells
        .into_values()
        .map(|rs| {
            let names = rs[0].metrics().map(|(name, _)| name);
            let metrics = names
                .iter()
                .enumerate()
                .map(|(k, name)| {
                    let vals: Vec<f64> = rs.iter().filter_map(|r| r.metrics()[k].1).collect();
                    (*name, Stat::of(&vals))
                })
                .collect();
            CellSummary {
                drop_probability: rs[0].drop_probability,
                base_delay_s: rs[0].base_delay_s,
                runs: rs.len(),
                metrics,
            }
        })
        .collect();
    out.sort_by(|a, b| {
        (a.drop_probability, a.base_delay_s)
            .partial_cmp(&(b.drop_probability, b.base_delay_s))
            .expect("finite cell parameters")
    });
    out
}

pub fn table_csv(cells: &[CellSummary]) -> Vec<u8> {
    let fmt = |v: Option<f64>| v.map_or(String::new(), |v| v.to_string());
    let mut out = Vec::new();
    writeln!(out, "# schema={TABLE_SCHEMA}").unwrap();
    let mut w = csv::Writer::from_writer(&mut out);
    if let Some(first) = cells.first() {
        let mut header = vec!["drop_probability".to_string(), "base_delay_s".into(), "runs".into()];
        for (name, _) in &first.metrics {
            header.push(format!("{name}_mean"));
            header.push(format!("{name}_std_error"));
        }
        w.write_record(&header).unwrap();
    }
    for c in cells {
        let mut rec = vec![c.drop_probability.to_string(), c.base_delay_s.to_string(), c.runs.to_string()];
        for (_, s) in &c.metrics {
            rec.push(fmt(s.mean));
            rec.push(fmt(s.std_error));
        }
        w.write_record(&rec).unwrap();
    }
    w.flush().unwrap();
    drop(w);
    out
}

/// `*.summary.csv` files directly inside `dir`, sorted by name.
pub fn summary_files(dir: &Path) -> Result<Vec<PathBuf>, MetricsError> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(io_err(dir))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.file_name().and_then(|n| n.to_str()).is_some_and(|n| n.ends_with(".summary.csv")))
        .collect();
    files.sort();
    Ok(files)
}

/// Reads summary files and writes the per-cell table to `out`.
pub fn summarize(files: &[PathBuf], out: &Path) -> Result<Vec<CellSummary>, MetricsError> {
    if files.is_empty() {
        return Err(MetricsError::Empty(out.display().to_string()));
    }
    let mut rows = Vec::new();
    for f in files {
        rows.extend(read_summary(f)?);
    }
    let cells = summarize_rows(&rows);
    write_file(out, &table_csv(&cells))?;
    Ok(cells)
}

#[cfg(test)]
mod tests;
