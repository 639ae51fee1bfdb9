//! Stand-alone harnesses: trace generation, change-detection scoring and
//! the slot-policy comparison.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};

use ironwan_core::eval::interpred_eval::{
    self, EvalSettings, PolicyResult, TrafficSpec, LOAD_LEVELS,
};
use ironwan_core::eval::rmip_eval::{self, RmipEvalRow};
use ironwan_core::eval::trace::{self, TraceSpec};
use ironwan_core::interpred::InterPredConfig;
use ironwan_core::rmip::RmipConfig;
use rayon::prelude::*;

use crate::error::{CliError, Result};

pub const TRACE_FILE: &str = "trace.csv";
pub const CHANGES_FILE: &str = "changes.csv";
pub const RMIP_EVAL_FILE: &str = "rmip_eval.csv";
pub const INTERPRED_EVAL_FILE: &str = "interpred_eval.csv";

pub fn read_toml<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
    toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| CliError::io(path, e))
}

/// Writes `trace.csv` and `changes.csv` into `out`.
pub fn gen_trace(spec: &TraceSpec, out: &Path) -> Result<trace::Trace> {
    let t = trace::generate(spec).map_err(CliError::Config)?;
    let path = out.join(TRACE_FILE);
    trace::write_csv(&t.records, create(&path)?).map_err(|e| CliError::io(&path, e))?;
    let path = out.join(CHANGES_FILE);
    trace::write_changes_csv(&t.changes, create(&path)?).map_err(|e| CliError::io(&path, e))?;
    Ok(t)
}

#[derive(Clone, Debug)]
pub struct RmipEvalOptions {
    pub trace: PathBuf,
    pub changes: usize,
    /// Least period difference, in seconds, between spliced halves.
    pub min_difference: f64,
    pub seed: u64,
    pub ns: Vec<usize>,
    pub es: Vec<f64>,
    pub base: RmipConfig,
}

pub struct RmipEvalOutcome {
    pub rows: Vec<RmipEvalRow>,
    pub skipped_lines: usize,
    pub evaluated_nodes: usize,
}

/// Writes `rmip_eval.csv` into `out`. Grid points are scored in parallel
/// and reported `n` outermost.
pub fn rmip_eval(opts: &RmipEvalOptions, out: &Path) -> Result<RmipEvalOutcome> {
    let f = File::open(&opts.trace).map_err(|e| {
        CliError::Config(format!("cannot read trace {}: {e}", opts.trace.display()))
    })?;
    let (records, skipped_lines) =
        trace::read_csv(BufReader::new(f)).map_err(|e| CliError::io(&opts.trace, e))?;
    let streams = rmip_eval::streams(&records);
    let (set, truths) =
        rmip_eval::inject_changes(&streams, opts.changes, opts.min_difference, opts.seed)
            .map_err(CliError::Config)?;
    let points: Vec<(usize, f64)> = opts
        .ns
        .iter()
        .flat_map(|&n| opts.es.iter().map(move |&e| (n, e)))
        .collect();
    for &(n, e) in &points {
        RmipConfig {
            n,
            e,
            grace: e,
            ..opts.base.clone()
        }
        .validate()
        .map_err(CliError::Config)?;
    }
    let rows: Vec<RmipEvalRow> = points
        .par_iter()
        .map(|&(n, e)| rmip_eval::grid(&set, &truths, &[n], &[e], &opts.base).remove(0))
        .collect();
    let path = out.join(RMIP_EVAL_FILE);
    rmip_eval::write_csv(&rows, create(&path)?).map_err(|e| CliError::io(&path, e))?;
    Ok(RmipEvalOutcome {
        rows,
        skipped_lines,
        evaluated_nodes: set.len(),
    })
}

/// Load levels by name; `all` selects every level.
pub fn load_levels(name: &str) -> Result<Vec<(&'static str, f64)>> {
    if name.eq_ignore_ascii_case("all") {
        return Ok(LOAD_LEVELS.to_vec());
    }
    LOAD_LEVELS
        .iter()
        .find(|(n, _)| {
            n.eq_ignore_ascii_case(name) || (name.eq_ignore_ascii_case("med") && *n == "medium")
        })
        .map(|&l| vec![l])
        .ok_or_else(|| {
            CliError::Config(format!("unknown load `{name}` (low, medium, high or all)"))
        })
}

/// Writes `interpred_eval.csv` into `out`.
pub fn interpred_eval(
    traffic: &TrafficSpec,
    loads: &[(&str, f64)],
    cfg: &InterPredConfig,
    settings: &EvalSettings,
    out: &Path,
) -> Result<Vec<PolicyResult>> {
    let per_load: Vec<Vec<PolicyResult>> = loads
        .par_iter()
        .map(|&(_, load)| {
            interpred_eval::evaluate(traffic, load, cfg, settings).map_err(CliError::Config)
        })
        .collect::<Result<_>>()?;
    let rows: Vec<PolicyResult> = per_load.into_iter().flatten().collect();
    let path = out.join(INTERPRED_EVAL_FILE);
    interpred_eval::write_csv(&rows, create(&path)?).map_err(|e| CliError::io(&path, e))?;
    Ok(rows)
}
