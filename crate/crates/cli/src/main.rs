use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use loomtune_cli::{
    cmd_eval_model, cmd_export_curve, cmd_list_workloads, cmd_replay, cmd_tune, load_config, CliError, Overrides,
    SEED_ENV,
};

#[derive(Parser)]
#[command(name = "loomtune", version, about = "Search-based tensor program scheduler")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Print the built-in workloads.
    ListWorkloads,
    /// Tune the tasks of a config file and write the log.
    Tune {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the config seed and LOOMTUNE_SEED.
        #[arg(long)]
        seed: Option<u64>,
        /// Overrides the config budget, in tuning units.
        #[arg(long)]
        budget: Option<usize>,
    },
    /// Re-measure every logged program and check the log against it.
    Replay { log: PathBuf },
    /// Write the best-so-far curve as CSV.
    ExportCurve {
        log: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train on 80% of the logged programs and score the rest.
    EvalModel {
        log: PathBuf,
        #[arg(long, default_value_t = 30)]
        k: usize,
        #[arg(long, default_value_t = 0)]
        split_seed: u64,
    },
}

fn run(cli: Cli) -> Result<bool, CliError> {
    match cli.command {
        Command::ListWorkloads => {
            for line in cmd_list_workloads() {
                println!("{line}");
            }
        }
        Command::Tune {
            config,
            out,
            seed,
            budget,
        } => {
            let env = std::env::var(SEED_ENV).ok();
            let cfg = load_config(&config, env.as_deref(), &Overrides { seed, budget })?;
            let summary = cmd_tune(&cfg, &out)?;
            println!(
                "{:<20} {:>6} {:>14} {:>14} {:>8}",
                "task", "units", "naive", "best", "speedup"
            );
            for t in summary {
                println!(
                    "{:<20} {:>6} {:>14.1} {:>14.1} {:>8.2}",
                    t.name, t.units, t.naive_cost, t.best_cost, t.speedup
                );
            }
            println!("log written to {}", out.display());
        }
        Command::Replay { log } => {
            let rep = cmd_replay(&log)?;
            for p in &rep.problems {
                println!("mismatch: {p}");
            }
            println!(
                "{} measurements, {} units, {} mismatches",
                rep.measurements,
                rep.units,
                rep.problems.len()
            );
            return Ok(rep.is_clean());
        }
        Command::ExportCurve { log, out } => {
            let n = cmd_export_curve(&log, &out)?;
            println!("{n} rows written to {}", out.display());
        }
        Command::EvalModel { log, k, split_seed } => {
            let r = cmd_eval_model(&log, k, split_seed)?;
            let m = r.metrics;
            println!("train {} test {}", r.train, r.test);
            println!("rmse {:.6}", m.rmse);
            println!("r2 {:.6}", m.r2);
            println!("pairwise_accuracy {:.6}", m.pairwise_accuracy);
            println!("recall@{} {:.6}", m.k, m.recall_at_k);
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
