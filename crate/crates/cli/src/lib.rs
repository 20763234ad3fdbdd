//! Command implementations behind the `loomtune` binary. Each command
//! returns its report so tests can drive it without spawning processes.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use loomtune::cost_model::GbdtModel;
use loomtune::metrics::Metrics;
use loomtune::tuner::{self, ReplayReport, TaskSpec, TuneSettings};
use loomtune::workloads::Workload;

pub const SEED_ENV: &str = "LOOMTUNE_SEED";

/// Fewest valid measurements `eval-model` accepts.
pub const MIN_EVAL_RECORDS: usize = 50;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("config {path}: {msg}")]
    Config { path: PathBuf, msg: String },
    #[error("{0}")]
    Core(#[from] loomtune::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("not enough data: {0}")]
    InsufficientData(String),
}

pub type Result<T> = std::result::Result<T, CliError>;

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|source| CliError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|source| CliError::Io {
        path: path.to_path_buf(),
        source,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    pub tasks: Vec<TaskSpec>,
    #[serde(default)]
    pub settings: TuneSettings,
}

/// Field overrides given on the command line.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub budget: Option<usize>,
}

/// Parses a config file; a seed from the environment beats the file, and
/// explicit overrides beat both.
pub fn load_config(path: &Path, env_seed: Option<&str>, over: &Overrides) -> Result<Config> {
    let text = read(path)?;
    let bad = |msg: String| CliError::Config {
        path: path.to_path_buf(),
        msg,
    };
    let mut cfg: Config = serde_json::from_str(&text).map_err(|e| bad(e.to_string()))?;
    if let Some(s) = env_seed {
        cfg.settings.seed = s
            .trim()
            .parse()
            .map_err(|_| bad(format!("{SEED_ENV}=`{s}` is not an unsigned integer")))?;
    }
    if let Some(s) = over.seed {
        cfg.settings.seed = s;
    }
    if let Some(b) = over.budget {
        cfg.settings.budget = b;
    }
    for (i, t) in cfg.tasks.iter().enumerate() {
        t.workload
            .check()
            .map_err(|e| bad(format!("tasks[{i}].workload: {e}")))?;
    }
    cfg.settings
        .check(&cfg.tasks)
        .map_err(|e| bad(format!("settings: {e}")))?;
    Ok(cfg)
}

/// One line per registered workload: kind, then `key=value` parameters.
pub fn cmd_list_workloads() -> Vec<String> {
    let mut lines: Vec<String> = Workload::registry()
        .iter()
        .map(|w| format!("{:<18} {}", w.kind(), w.params()))
        .collect();
    lines.sort();
    lines
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TaskSummary {
    pub name: String,
    pub units: usize,
    pub naive_cost: f64,
    pub best_cost: f64,
    pub speedup: f64,
}

pub fn cmd_tune(cfg: &Config, out: &Path) -> Result<Vec<TaskSummary>> {
    let res = tuner::tune(&cfg.tasks, &cfg.settings)?;
    write(out, &tuner::write_log(&res.log))?;
    Ok(res
        .tasks
        .iter()
        .zip(&res.naive_costs)
        .map(|(t, naive)| {
            let best = t.latency().unwrap_or(*naive).min(*naive);
            TaskSummary {
                name: t.name.clone(),
                units: t.units(),
                naive_cost: *naive,
                best_cost: best,
                speedup: naive / best,
            }
        })
        .collect())
}

pub fn load_log(path: &Path) -> Result<Vec<tuner::LogRecord>> {
    Ok(tuner::read_log(&read(path)?)?)
}

pub fn cmd_replay(log: &Path) -> Result<ReplayReport> {
    Ok(tuner::replay_log(&load_log(log)?)?)
}

/// Writes the tuning curve; returns the number of data rows.
pub fn cmd_export_curve(log: &Path, out: &Path) -> Result<usize> {
    let rows = tuner::curve_rows(&load_log(log)?)?;
    let mut w = csv::Writer::from_path(out)?;
    w.write_record(["iteration", "task", "best_cost", "objective"])?;
    for r in &rows {
        w.write_record([
            r.iteration.to_string(),
            r.task.to_string(),
            r.best_cost.to_string(),
            r.objective.map(|o| o.to_string()).unwrap_or_default(),
        ])?;
    }
    w.flush().map_err(|source| CliError::Io {
        path: out.to_path_buf(),
        source,
    })?;
    Ok(rows.len())
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalReport {
    pub train: usize,
    pub test: usize,
    pub metrics: Metrics,
}

/// Trains on a seeded 80% of the logged programs and scores the rest.
pub fn cmd_eval_model(log: &Path, k: usize, split_seed: u64) -> Result<EvalReport> {
    let log = load_log(log)?;
    let (settings, _) = tuner::log_header(&log)?;
    let mut records = tuner::records_from_log(&log)?;
    let valid = records.iter().filter(|r| r.throughput > 0.0).count();
    if valid < MIN_EVAL_RECORDS {
        return Err(CliError::InsufficientData(format!(
            "{valid} valid measurements, need at least {MIN_EVAL_RECORDS}"
        )));
    }
    records.shuffle(&mut ChaCha8Rng::seed_from_u64(split_seed));
    let test = records.split_off(records.len() * 4 / 5);
    if k == 0 || k > test.len() {
        return Err(CliError::InsufficientData(format!(
            "k = {k} but the test split has {} programs",
            test.len()
        )));
    }
    let model = GbdtModel::train(&records, &settings.train)?;
    Ok(EvalReport {
        train: records.len(),
        test: test.len(),
        metrics: model.eval(&test, k)?,
    })
}
