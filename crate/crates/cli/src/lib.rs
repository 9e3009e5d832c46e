//! Experiment runner: gradient checks, optimization runs, equivalence checks
//! and Z-learning, driven by one JSON config.

pub mod build;
pub mod check;
pub mod config;
pub mod error;
pub mod optimize;
pub mod output;
pub mod zrun;

use std::path::Path;

pub use check::{run_equivcheck, run_gradcheck, EquivReport, GradCheckReport};
pub use config::ExperimentConfig;
pub use error::CliError;
pub use optimize::{run_optimize, OptimizeReport, OptimizeRun};
pub use zrun::{run_zlearn, ZLearnReport, ZLearnRun};

use config::Method;
use output::{to_json, write_file};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    GradCheck,
    Optimize,
    Equiv,
    Zlearn,
}

/// Writes `name` under `out`, or prints it when there is no output directory
/// and it is the run's primary artifact.
fn emit(out: Option<&Path>, name: &str, contents: &str, primary: bool) -> Result<(), CliError> {
    match out {
        Some(dir) => write_file(dir, name, contents),
        None => {
            if primary {
                print!("{contents}");
            }
            Ok(())
        }
    }
}

fn emit_zlearn(run: &ZLearnRun, out: Option<&Path>) -> Result<bool, CliError> {
    emit(out, "curve.csv", &run.curve_csv(), false)?;
    emit(out, "z_table.txt", &run.z_table, false)?;
    emit(out, "report.json", &to_json(&run.report), true)?;
    Ok(run.report.pass)
}

/// Runs one subcommand and writes its artifacts. Returns whether the run's
/// check passed (runs without a check always pass).
pub fn execute(command: Command, config: &ExperimentConfig, out: Option<&Path>, threads: Option<usize>) -> Result<bool, CliError> {
    if let Some(dir) = out {
        write_file(dir, "config.json", &config.to_json())?;
    }
    match command {
        Command::GradCheck => {
            let report = run_gradcheck(config)?;
            emit(out, "report.json", &to_json(&report), true)?;
            Ok(report.pass)
        }
        Command::Equiv => {
            let report = run_equivcheck(config)?;
            emit(out, "report.json", &to_json(&report), true)?;
            Ok(report.pass)
        }
        Command::Zlearn => emit_zlearn(&run_zlearn(config)?, out),
        Command::Optimize => {
            if matches!(config.algorithm.method, Method::ZlearnBaseline | Method::ZlearnGreedy) {
                return emit_zlearn(&run_zlearn(config)?, out);
            }
            let run = run_optimize(config, threads)?;
            emit(out, "curve.csv", &run.curve.to_csv(), true)?;
            emit(out, "report.json", &to_json(&run.report), false)?;
            if let Some(lines) = &run.rollouts_jsonl {
                emit(out, "rollouts.jsonl", lines, false)?;
            }
            Ok(true)
        }
    }
}
