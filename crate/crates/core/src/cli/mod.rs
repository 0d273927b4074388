//! Command-line entry point for the `dtc` binary.
//!
//! ```text
//! dtc <SUBCOMMAND> [--config PATH] [--seed N] [--out DIR] [--workers N] [--key.path VALUE]...
//! ```
//!
//! Any flag that is not one of the global options is a dotted config
//! override, e.g. `--timeseries.gpt_train.epochs 5`.

pub mod config;
pub mod stages;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Parser, Subcommand};
use thiserror::Error;

pub use config::RunConfig;
pub use stages::{EvalSummary, LoopReport, Run, TrainTask};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("config: {0}")]
    Config(String),
    #[error("{0} failed: {1}")]
    Stage(String, String),
    #[error(transparent)]
    Scene(#[from] crate::scene::SceneError),
    #[error(transparent)]
    Trace(#[from] crate::raytrace::TraceError),
    #[error(transparent)]
    Records(#[from] crate::records::RecordError),
    #[error(transparent)]
    Dataset(#[from] crate::dataset::DatasetError),
    #[error(transparent)]
    Neural(#[from] crate::neural::NeuralError),
    #[error(transparent)]
    Experiment(#[from] crate::experiments::ExperimentError),
    #[error(transparent)]
    Loop(#[from] crate::dtcloop::LoopError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            _ => 1,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "dtc", about = "Digital-twin channel pipeline", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// TOML run configuration; built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Global seed; every stage derives its seeds from it.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory for all artifacts.
    #[arg(long, short = 'o', global = true, default_value = "out")]
    out: PathBuf,
    /// Worker threads for parallel stages; defaults to the available cores.
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Suppress progress messages on stderr.
    #[arg(long, short = 'q', global = true)]
    quiet: bool,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate the origin and new scenes (scene.json, scene_new.json).
    SceneGen,
    /// Ray-trace every trajectory and receiver set (snapshots/).
    Simulate,
    /// Build the time-series, fusion and loop datasets (datasets/).
    Dataset,
    /// Train predictors and fusion models (models/).
    Train {
        #[arg(long, value_enum, default_value = "all")]
        task: TrainTask,
    },
    /// Test-split metrics of the trained models (eval.json).
    Eval,
    /// NMSE versus prediction horizon (curve.csv, curve.svg).
    Sweep,
    /// Origin/new-scene reconstruction table (table2.csv, table2.txt).
    Table2,
    /// Closed loop with the trained predictor and the oracle (loop_log.jsonl, loop_summary.json).
    DtcRun,
    /// Path-loss and RSRP coverage map (channel_map.csv).
    Map,
    /// Every stage from scratch plus report.json.
    Reproduce,
}

const GLOBAL_FLAGS: &[&str] = &["config", "seed", "out", "workers", "quiet", "task", "help", "version"];

/// Splits `--key value` config overrides from the arguments clap understands.
fn split_overrides(args: Vec<OsString>) -> Result<(Vec<OsString>, Vec<(String, String)>), CliError> {
    let mut kept = Vec::new();
    let mut overrides = Vec::new();
    let mut it = args.into_iter();
    if let Some(bin) = it.next() {
        kept.push(bin);
    }
    while let Some(arg) = it.next() {
        let s = arg.to_string_lossy().into_owned();
        let Some(flag) = s.strip_prefix("--") else {
            kept.push(arg);
            continue;
        };
        let (name, inline) = match flag.split_once('=') {
            Some((n, v)) => (n.to_string(), Some(v.to_string())),
            None => (flag.to_string(), None),
        };
        if name.is_empty() || GLOBAL_FLAGS.contains(&name.as_str()) {
            kept.push(arg);
            continue;
        }
        let value = match inline {
            Some(v) => v,
            None => it
                .next()
                .map(|v| v.to_string_lossy().into_owned())
                .ok_or_else(|| CliError::Usage(format!("override --{name} needs a value")))?,
        };
        overrides.push((name.replace('-', "_"), value));
    }
    Ok((kept, overrides))
}

fn resolve(cli: &Cli, overrides: &[(String, String)]) -> Result<RunConfig, CliError> {
    let base = match &cli.config {
        Some(p) => RunConfig::from_toml(
            &std::fs::read_to_string(p).map_err(|e| CliError::Usage(format!("{}: {e}", p.display())))?,
        )?,
        None => RunConfig::default(),
    };
    let mut config = base.with_overrides(overrides)?;
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    Ok(config)
}

fn dispatch(cli: Cli, overrides: Vec<(String, String)>) -> Result<(), CliError> {
    let config = resolve(&cli, &overrides)?;
    let mut run = Run::new(config, &cli.out);
    run.quiet = cli.quiet;
    run.echo_config()?;
    let workers = cli.workers.unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
    if workers == 0 {
        return Err(CliError::Usage("--workers must be positive".into()));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| CliError::Config(e.to_string()))?;
    pool.install(|| match cli.command {
        Command::SceneGen => run.scene_gen().map(|_| ()),
        Command::Simulate => run.simulate(),
        Command::Dataset => run.dataset(),
        Command::Train { task } => run.train(task).map(|_| ()),
        Command::Eval => run.eval().map(|_| ()),
        Command::Sweep => run.sweep().map(|_| ()),
        Command::Table2 => run.table2().map(|_| ()),
        Command::DtcRun => run.dtc_run().map(|_| ()),
        Command::Map => run.map().map(|_| ()),
        Command::Reproduce => run.reproduce().map(|_| ()),
    })
}

/// Parses `args` (including the program name), runs the subcommand and
/// returns the process exit code.
pub fn run_cli<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString>,
{
    let args: Vec<OsString> = args.into_iter().map(Into::into).collect();
    let (kept, overrides) = match split_overrides(args) {
        Ok(x) => x,
        Err(e) => {
            eprintln!("error: {e}");
            return 2;
        }
    };
    let cli = match Cli::try_parse_from(kept) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli, overrides) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn os(v: &[&str]) -> Vec<OsString> {
        v.iter().map(OsString::from).collect()
    }

    #[test]
    fn overrides_are_split_from_known_flags() {
        let (kept, o) = split_overrides(os(&[
            "dtc",
            "sweep",
            "--seed",
            "3",
            "--timeseries.n-slots",
            "600",
            "--map.resolution=2.5",
            "-o",
            "x",
        ]))
        .unwrap();
        assert_eq!(kept, os(&["dtc", "sweep", "--seed", "3", "-o", "x"]));
        assert_eq!(
            o,
            vec![
                ("timeseries.n_slots".to_string(), "600".to_string()),
                ("map.resolution".to_string(), "2.5".to_string())
            ]
        );
        assert!(split_overrides(os(&["dtc", "sweep", "--map.resolution"])).is_err());
    }

    #[test]
    fn usage_errors_exit_2() {
        assert_eq!(run_cli(["dtc"]), 2);
        assert_eq!(run_cli(["dtc", "frobnicate"]), 2);
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().to_str().unwrap();
        assert_eq!(run_cli(["dtc", "scene-gen", "-q", "-o", out, "--nope.key", "1"]), 2);
    }
}
