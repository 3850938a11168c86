//! Seeded headless runs and parameter sweeps.

use std::path::{Path, PathBuf};

use blendnav_core::sim::{self, RunMetrics, SimError};
use log::info;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::{Cell, ExperimentConfig, SweepLink};
use crate::metrics::{self, MetricsError, SummaryRow, TickRow};

pub const MANIFEST_SCHEMA: &str = "blendnav-manifest/1";

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

/// One closed-loop run; `(config, seed)` fixes every output.
pub fn run(config: &ExperimentConfig, seed: u64) -> Result<RunMetrics, SimError> {
    sim::run(&config.sim_config(), seed)
}

fn tick_rows(seed: u64, m: &RunMetrics) -> impl Iterator<Item = TickRow> + '_ {
    m.rows.iter().map(move |r| TickRow::new(seed, r))
}

/// Files written for one run or cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Outputs {
    pub ticks: PathBuf,
    pub summary: PathBuf,
}

fn write_outputs(out: &Path, stem: &str, ticks: &[TickRow], summary: &[SummaryRow]) -> Result<Outputs, MetricsError> {
    let o = Outputs {
        ticks: PathBuf::from(format!("{stem}.ticks.csv")),
        summary: PathBuf::from(format!("{stem}.summary.csv")),
    };
    metrics::write_file(&out.join(&o.ticks), &metrics::ticks_csv(ticks))?;
    metrics::write_file(&out.join(&o.summary), &metrics::summary_csv(summary))?;
    Ok(o)
}

/// Runs one seed and writes `seed<N>.ticks.csv` and `seed<N>.summary.csv`
/// under `out`. Paths in the result are relative to `out`.
pub fn run_to_dir(config: &ExperimentConfig, seed: u64, out: &Path) -> Result<(RunMetrics, Outputs), ExperimentError> {
    let m = run(config, seed)?;
    let ticks: Vec<TickRow> = tick_rows(seed, &m).collect();
    let summary = [SummaryRow::new(&config.own_cell(), seed, &m)];
    let outputs = write_outputs(out, &format!("seed{seed}"), &ticks, &summary)?;
    info!("seed {seed}: {} ticks, completed {}", m.summary.ticks, m.summary.completed);
    Ok((m, outputs))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestCell {
    #[serde(flatten)]
    pub cell: Cell,
    #[serde(flatten)]
    pub outputs: Outputs,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub schema: String,
    pub link: SweepLink,
    pub seeds: Vec<u64>,
    pub cells: Vec<ManifestCell>,
}

/// Runs seeds `0..repetitions` in every cell, in parallel, and writes one
/// ticks file and one summary file per cell plus `manifest.json`.
pub fn sweep(config: &ExperimentConfig, out: &Path) -> Result<Manifest, ExperimentError> {
    let cells = config.cells();
    let seeds: Vec<u64> = (0..config.repetitions).collect();
    let jobs: Vec<(usize, u64)> = (0..cells.len()).flat_map(|c| seeds.iter().map(move |&s| (c, s))).collect();
    let results: Vec<RunMetrics> = jobs
        .par_iter()
        .map(|&(c, seed)| run(&config.for_cell(&cells[c]), seed))
        .collect::<Result<_, _>>()?;

    let mut manifest = Manifest {
        schema: MANIFEST_SCHEMA.into(),
        link: config.sweep.link,
        seeds: seeds.clone(),
        cells: Vec::with_capacity(cells.len()),
    };
    for (cell, runs) in cells.iter().zip(results.chunks(seeds.len())) {
        let ticks: Vec<TickRow> = seeds.iter().zip(runs).flat_map(|(&s, m)| tick_rows(s, m)).collect();
        let summary: Vec<SummaryRow> = seeds.iter().zip(runs).map(|(&s, m)| SummaryRow::new(cell, s, m)).collect();
        let outputs = write_outputs(out, &format!("cell{:03}", cell.index), &ticks, &summary)?;
        info!(
            "cell {}: drop {} delay {} -> {} runs",
            cell.index,
            cell.drop_probability,
            cell.base_delay_s,
            runs.len()
        );
        manifest.cells.push(ManifestCell { cell: *cell, outputs });
    }
    let json = serde_json::to_vec_pretty(&manifest).expect("manifest serializes");
    metrics::write_file(&out.join("manifest.json"), &json)?;
    Ok(manifest)
}
