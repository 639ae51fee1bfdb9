//! Sweep execution and result files.

use std::collections::BTreeMap;
use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use ironwan_core::netsim::{self, log::write_jsonl, NodeMetrics, RunMetrics, System};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};
use crate::scenario::{Cell, CellKey, ScenarioFile};

pub const METRICS_FILE: &str = "metrics.csv";
pub const SUMMARY_FILE: &str = "summary.json";
pub const LOG_DIR: &str = "logs";

/// One line of `metrics.csv`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub cell: usize,
    pub gateways: usize,
    pub networks: u32,
    pub load: String,
    pub system: System,
    pub retx_limit: u32,
    pub seed: u64,
    pub nodes: usize,
    pub ack_fraction: f64,
    pub generated: u64,
    pub unique_received: u64,
    pub unique_per_node: f64,
    pub confirmed: u64,
    pub acked: u64,
    pub pdr_mean: Option<f64>,
    pub pdr_min: Option<f64>,
    pub pdr_p25: Option<f64>,
    pub pdr_median: Option<f64>,
    pub noretx_mean: f64,
    pub uplink_transmissions: u64,
    pub retransmissions: u64,
    pub acks_band0: u64,
    pub acks_band1: u64,
    pub g2g_messages: u64,
    pub g2g_airtime_us: u64,
    pub g2g_band1_messages: u64,
    pub recovered_uplinks: u64,
    pub neighbour_acks_delivered: u64,
    pub handovers_requested: u64,
    pub g2g_starved: u64,
    pub ack_abandoned: u64,
    pub wcs_relays: u64,
    pub overhead_messages: u64,
    pub duty_cycle_violations: u64,
    pub unreachable_nodes: u64,
    pub max_agent_snapshot_bytes: u64,
}

impl MetricsRow {
    fn new(cell: &Cell, m: &RunMetrics) -> Self {
        Self {
            cell: cell.index,
            gateways: cell.key.gateways,
            networks: cell.key.networks,
            load: cell.key.load.clone(),
            system: cell.key.system,
            retx_limit: cell.key.retx_limit,
            seed: cell.seed,
            nodes: m.nodes,
            ack_fraction: m.load,
            generated: m.generated,
            unique_received: m.unique_received,
            unique_per_node: m.unique_per_node,
            confirmed: m.confirmed,
            acked: m.acked,
            pdr_mean: m.pdr_mean,
            pdr_min: m.pdr_min,
            pdr_p25: m.pdr_p25,
            pdr_median: m.pdr_median,
            noretx_mean: m.noretx_mean,
            uplink_transmissions: m.uplink_transmissions,
            retransmissions: m.retransmissions,
            acks_band0: m.acks_band0,
            acks_band1: m.acks_band1,
            g2g_messages: m.g2g_messages,
            g2g_airtime_us: m.g2g_airtime_us,
            g2g_band1_messages: m.g2g_band1_messages,
            recovered_uplinks: m.recovered_uplinks,
            neighbour_acks_delivered: m.neighbour_acks_delivered,
            handovers_requested: m.handovers_requested,
            g2g_starved: m.g2g_starved,
            ack_abandoned: m.ack_abandoned,
            wcs_relays: m.wcs_relays,
            overhead_messages: m.overhead_messages,
            duty_cycle_violations: m.duty_cycle_violations,
            unreachable_nodes: m.unreachable_nodes,
            max_agent_snapshot_bytes: m.max_agent_snapshot_bytes,
        }
    }

    pub fn key(&self) -> CellKey {
        CellKey {
            gateways: self.gateways,
            networks: self.networks,
            load: self.load.clone(),
            system: self.system,
            retx_limit: self.retx_limit,
        }
    }
}

/// The outcome of one cell.
pub struct CellResult {
    pub row: MetricsRow,
    pub nodes: Vec<NodeMetrics>,
    pub log_file: Option<PathBuf>,
}

/// Box-plot statistics of one quantity.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stats {
    pub count: usize,
    pub mean: f64,
    pub min: f64,
    pub p25: f64,
    pub median: f64,
    pub p75: f64,
    pub max: f64,
}

impl Stats {
    pub fn of(values: &[f64]) -> Option<Stats> {
        if values.is_empty() {
            return None;
        }
        let mut v = values.to_vec();
        v.sort_by(f64::total_cmp);
        let q = |p: f64| {
            let pos = p * (v.len() - 1) as f64;
            let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
            v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
        };
        Some(Stats {
            count: v.len(),
            mean: v.iter().sum::<f64>() / v.len() as f64,
            min: v[0],
            p25: q(0.25),
            median: q(0.5),
            p75: q(0.75),
            max: v[v.len() - 1],
        })
    }
}

/// Across-seed statistics of one sweep cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellSummary {
    pub gateways: usize,
    pub networks: u32,
    pub load: String,
    pub system: System,
    pub retx_limit: u32,
    pub seeds: Vec<u64>,
    /// Per-node delivery ratios pooled over all seeds.
    pub node_pdr: Option<Stats>,
    /// Per-node unique messages pooled over all seeds.
    pub node_unique: Option<Stats>,
    /// The remaining entries are over per-seed values.
    pub pdr_mean: Option<Stats>,
    pub pdr_min: Option<Stats>,
    pub unique_per_node: Option<Stats>,
    pub noretx_mean: Option<Stats>,
    pub overhead_messages: Option<Stats>,
    pub g2g_messages: Option<Stats>,
    pub wcs_relays: Option<Stats>,
    pub duty_cycle_violations: u64,
}

#[derive(Clone, Copy, Debug, Default)]
pub struct RunOptions {
    /// Worker threads; 0 picks the number of cores.
    pub threads: usize,
}

pub fn execute(file: &ScenarioFile, out: &Path, opts: RunOptions) -> Result<Vec<CellResult>> {
    let cells = file.cells();
    fs::create_dir_all(out).map_err(|e| CliError::io(out, e))?;
    if cells.iter().any(|c| c.config.log_events) {
        let logs = out.join(LOG_DIR);
        fs::create_dir_all(&logs).map_err(|e| CliError::io(&logs, e))?;
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(opts.threads)
        .build()
        .map_err(|e| CliError::Runtime(e.to_string()))?;
    let results: Vec<CellResult> = pool.install(|| {
        cells
            .par_iter()
            .map(|cell| run_cell(cell, out))
            .collect::<Result<Vec<_>>>()
    })?;
    write_metrics(&out.join(METRICS_FILE), results.iter().map(|r| &r.row))?;
    let summary = summarise(&results);
    let path = out.join(SUMMARY_FILE);
    let text =
        serde_json::to_string_pretty(&summary).map_err(|e| CliError::Runtime(e.to_string()))?;
    fs::write(&path, text + "\n").map_err(|e| CliError::io(&path, e))?;
    Ok(results)
}

fn run_cell(cell: &Cell, out: &Path) -> Result<CellResult> {
    let output = netsim::run(&cell.config)
        .map_err(|e| CliError::Config(format!("cell {}: {e}", cell.index)))?;
    let log_file = if cell.config.log_events {
        let path = out
            .join(LOG_DIR)
            .join(format!("cell-{:04}.jsonl", cell.index));
        let f = fs::File::create(&path).map_err(|e| CliError::io(&path, e))?;
        write_jsonl(&output.log, BufWriter::new(f)).map_err(|e| CliError::io(&path, e))?;
        Some(path)
    } else {
        None
    };
    Ok(CellResult {
        row: MetricsRow::new(cell, &output.metrics),
        nodes: output.nodes,
        log_file,
    })
}

pub fn write_metrics<'a>(
    path: &Path,
    rows: impl IntoIterator<Item = &'a MetricsRow>,
) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| CliError::io(path, e))?;
    for r in rows {
        w.serialize(r).map_err(|e| CliError::io(path, e))?;
    }
    w.flush().map_err(|e| CliError::io(path, e))
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRow>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| CliError::io(path, e))?;
    r.deserialize()
        .collect::<std::result::Result<Vec<MetricsRow>, _>>()
        .map_err(|e| CliError::io(path, e))
}

pub fn summarise(results: &[CellResult]) -> Vec<CellSummary> {
    let mut groups: BTreeMap<usize, (CellKey, Vec<&CellResult>)> = BTreeMap::new();
    let mut first_of: BTreeMap<CellKey, usize> = BTreeMap::new();
    for r in results {
        let key = r.row.key();
        let first = *first_of.entry(key.clone()).or_insert(r.row.cell);
        groups
            .entry(first)
            .or_insert_with(|| (key, Vec::new()))
            .1
            .push(r);
    }
    groups
        .into_values()
        .map(|(key, rs)| {
            let per_seed = |f: &dyn Fn(&MetricsRow) -> Option<f64>| {
                Stats::of(&rs.iter().filter_map(|r| f(&r.row)).collect::<Vec<_>>())
            };
            let pooled = |f: &dyn Fn(&NodeMetrics) -> Option<f64>| {
                Stats::of(
                    &rs.iter()
                        .flat_map(|r| r.nodes.iter().filter_map(f))
                        .collect::<Vec<_>>(),
                )
            };
            CellSummary {
                gateways: key.gateways,
                networks: key.networks,
                load: key.load.clone(),
                system: key.system,
                retx_limit: key.retx_limit,
                seeds: rs.iter().map(|r| r.row.seed).collect(),
                node_pdr: pooled(&|n| n.pdr()),
                node_unique: pooled(&|n| Some(n.unique_received as f64)),
                pdr_mean: per_seed(&|m| m.pdr_mean),
                pdr_min: per_seed(&|m| m.pdr_min),
                unique_per_node: per_seed(&|m| Some(m.unique_per_node)),
                noretx_mean: per_seed(&|m| Some(m.noretx_mean)),
                overhead_messages: per_seed(&|m| Some(m.overhead_messages as f64)),
                g2g_messages: per_seed(&|m| Some(m.g2g_messages as f64)),
                wcs_relays: per_seed(&|m| Some(m.wcs_relays as f64)),
                duty_cycle_violations: rs.iter().map(|r| r.row.duty_cycle_violations).sum(),
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stats_quartiles() {
        let s = Stats::of(&[4.0, 1.0, 3.0, 2.0, 5.0]).unwrap();
        assert_eq!(
            (s.min, s.p25, s.median, s.p75, s.max, s.mean),
            (1.0, 2.0, 3.0, 4.0, 5.0, 3.0)
        );
        assert_eq!(Stats::of(&[]), None);
        let s = Stats::of(&[1.0, 2.0]).unwrap();
        assert_eq!(s.median, 1.5);
    }
}
