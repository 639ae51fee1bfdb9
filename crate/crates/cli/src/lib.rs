//! The `ironwan` command: scenario sweeps and the stand-alone evaluation
//! harnesses.

pub mod error;
pub mod evals;
pub mod run;
pub mod scenario;

use std::path::PathBuf;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use ironwan_core::eval::interpred_eval::{EvalSettings, TrafficSpec};
use ironwan_core::eval::trace::TraceSpec;

pub use error::{CliError, Result};
use scenario::ScenarioFile;

#[derive(Debug, Parser)]
#[command(
    name = "ironwan",
    version,
    about = "Overlapping LoRaWAN network simulator and evaluation harnesses"
)]
pub struct Cli {
    /// Scenario file (TOML).
    #[arg(long, global = true, env = "IRONWAN_SCENARIO")]
    pub scenario: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true, env = "IRONWAN_OUT")]
    pub out: Option<PathBuf>,
    /// Replaces the seed list of a sweep, or seeds a harness.
    #[arg(long, global = true, env = "IRONWAN_SEED")]
    pub seed: Option<u64>,
    /// Worker threads; 0 uses every core.
    #[arg(long, global = true, env = "IRONWAN_THREADS", default_value_t = 0)]
    pub threads: usize,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Runs every cell of a scenario sweep.
    Run,
    /// Scores period-change detection on a trace over an (n, e) grid.
    RmipEval(RmipEvalArgs),
    /// Compares slot policies on synthetic overheard traffic.
    InterpredEval(InterpredEvalArgs),
    /// Writes a synthetic arrival trace.
    GenTrace(GenTraceArgs),
}

#[derive(Debug, Args)]
pub struct RmipEvalArgs {
    /// Trace CSV (`node_addr,counter,arrival_time_us`).
    #[arg(long, env = "IRONWAN_TRACE")]
    pub trace: PathBuf,
    /// Period changes to inject.
    #[arg(long, default_value_t = 20)]
    pub changes: usize,
    /// Least period difference in seconds between spliced segments.
    #[arg(long, default_value_t = 5.0)]
    pub min_difference: f64,
    /// Window sizes.
    #[arg(long, value_delimiter = ',', default_values_t = [5, 6, 7, 8, 9, 10, 11, 12, 13, 14, 15])]
    pub n: Vec<usize>,
    /// Deviation thresholds in seconds.
    #[arg(long, value_delimiter = ',', default_values_t = [0.5, 1.0, 1.5, 2.0])]
    pub e: Vec<f64>,
}

#[derive(Debug, Args)]
pub struct InterpredEvalArgs {
    /// low, medium, high or all.
    #[arg(long, default_value = "all")]
    pub load: String,
    /// Traffic description (TOML); defaults otherwise.
    #[arg(long)]
    pub traffic: Option<PathBuf>,
    /// Seconds of training before scoring.
    #[arg(long)]
    pub training: Option<f64>,
    /// Seconds scored.
    #[arg(long)]
    pub duration: Option<f64>,
}

#[derive(Debug, Args)]
pub struct GenTraceArgs {
    /// Trace description (TOML); the flags below override it.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    #[arg(long)]
    pub nodes: Option<usize>,
    /// Seconds.
    #[arg(long)]
    pub duration: Option<f64>,
    #[arg(long)]
    pub jitter: Option<f64>,
    #[arg(long)]
    pub loss: Option<f64>,
    #[arg(long)]
    pub changes: Option<usize>,
}

impl Cli {
    fn out(&self) -> Result<PathBuf> {
        self.out
            .clone()
            .ok_or_else(|| CliError::Config("--out is required".into()))
    }

    fn scenario_file(&self) -> Result<Option<ScenarioFile>> {
        self.scenario.as_deref().map(ScenarioFile::load).transpose()
    }
}

/// Runs one command and returns the lines to print.
pub fn dispatch(cli: &Cli) -> Result<Vec<String>> {
    let started = Instant::now();
    let mut lines = Vec::new();
    match &cli.command {
        Command::Run => {
            let path = cli
                .scenario
                .as_deref()
                .ok_or_else(|| CliError::Config("--scenario is required".into()))?;
            let mut file = ScenarioFile::load(path)?;
            if let Some(seed) = cli.seed {
                file.sweep.seeds = vec![seed];
            }
            let out = cli.out()?;
            let results = run::execute(
                &file,
                &out,
                run::RunOptions {
                    threads: cli.threads,
                },
            )?;
            let violations: u64 = results.iter().map(|r| r.row.duty_cycle_violations).sum();
            lines.push(format!(
                "{} runs written to {}",
                results.len(),
                out.display()
            ));
            lines.push(format!("duty-cycle violations: {violations}"));
        }
        Command::RmipEval(a) => {
            let base = cli
                .scenario_file()?
                .map(|f| f.scenario.rmip)
                .unwrap_or_default();
            let opts = evals::RmipEvalOptions {
                trace: a.trace.clone(),
                changes: a.changes,
                min_difference: a.min_difference,
                seed: cli.seed.unwrap_or(1),
                ns: a.n.clone(),
                es: a.e.clone(),
                base,
            };
            let r = with_threads(cli.threads, || evals::rmip_eval(&opts, &cli.out()?))?;
            lines.push(format!(
                "{} grid points over {} periodic nodes; {} unparseable lines skipped",
                r.rows.len(),
                r.evaluated_nodes,
                r.skipped_lines
            ));
        }
        Command::InterpredEval(a) => {
            let cfg = cli
                .scenario_file()?
                .map(|f| f.scenario.interpred)
                .unwrap_or_default();
            let mut traffic: TrafficSpec = match &a.traffic {
                Some(p) => evals::read_toml(p)?,
                None => TrafficSpec::default(),
            };
            let mut settings = EvalSettings::default();
            if let Some(seed) = cli.seed {
                traffic.seed = seed;
                settings.seed = seed;
            }
            if let Some(t) = a.training {
                settings.training = t;
            }
            if let Some(d) = a.duration {
                settings.duration = d;
            }
            let loads = evals::load_levels(&a.load)?;
            let rows = with_threads(cli.threads, || {
                evals::interpred_eval(&traffic, &loads, &cfg, &settings, &cli.out()?)
            })?;
            for r in &rows {
                lines.push(format!(
                    "{:<10} load {:<4} bad ratio {:.3} fulfilment {:.3} reward {:.1}",
                    r.policy.name(),
                    r.load,
                    r.bad_ratio(),
                    r.fulfilment(),
                    r.total_reward
                ));
            }
        }
        Command::GenTrace(a) => {
            let mut spec: TraceSpec = match &a.spec {
                Some(p) => evals::read_toml(p)?,
                None => TraceSpec::default(),
            };
            if let Some(seed) = cli.seed {
                spec.seed = seed;
            }
            spec.nodes = a.nodes.unwrap_or(spec.nodes);
            spec.duration = a.duration.unwrap_or(spec.duration);
            spec.jitter = a.jitter.unwrap_or(spec.jitter);
            spec.loss = a.loss.unwrap_or(spec.loss);
            spec.changes = a.changes.unwrap_or(spec.changes);
            let t = evals::gen_trace(&spec, &cli.out()?)?;
            lines.push(format!(
                "{} records from {} nodes ({} periodic, {} period changes)",
                t.records.len(),
                spec.nodes,
                t.periodic.len(),
                t.changes.len()
            ));
        }
    }
    lines.push(format!("done in {:.1} s", started.elapsed().as_secs_f64()));
    Ok(lines)
}

fn with_threads<T: Send>(threads: usize, f: impl FnOnce() -> Result<T> + Send) -> Result<T> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| CliError::Runtime(e.to_string()))?
        .install(f)
}
