//! Z-learning on gridworld instances, measured against the exact desirability.

use dso_core::zlearn::{solve_z_firstexit, write_z_table, zlearn, ZCurvePoint, ZFunction, ZLearnConfig, ZLearnMode};
use serde::Serialize;

use crate::build::{build_instance, Instance, Origin};
use crate::config::{ExperimentConfig, Method};
use crate::error::{capability, CliError};

/// Error level used for the `steps_to_5pct` summary.
pub const REPORT_TOLERANCE: f64 = 0.05;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ZLearnReport {
    pub method: Method,
    pub steps: usize,
    pub step_constant: f64,
    pub final_max_relative_error: f64,
    pub final_bellman_residual: f64,
    /// First reported step after which the error stays below 5%.
    pub steps_to_5pct: Option<usize>,
    pub episodes: usize,
    pub floored_updates: usize,
    pub tolerance: Option<f64>,
    pub pass: bool,
}

pub struct ZLearnRun {
    pub curve: Vec<ZCurvePoint>,
    pub report: ZLearnReport,
    /// Learned energies as a key-value table.
    pub z_table: String,
}

impl ZLearnRun {
    /// `step,bellman_residual,max_relative_error`.
    pub fn curve_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["step", "bellman_residual", "max_relative_error"]).expect("in-memory write");
        for p in &self.curve {
            let err = p.max_relative_error.map_or_else(String::new, |e| e.to_string());
            w.write_record([p.step.to_string(), p.bellman_residual.to_string(), err]).expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("in-memory flush")).expect("ascii csv")
    }
}

pub fn run_zlearn(config: &ExperimentConfig) -> Result<ZLearnRun, CliError> {
    let mode = match config.algorithm.method {
        Method::ZlearnBaseline => ZLearnMode::Baseline,
        Method::ZlearnGreedy => ZLearnMode::GreedyExact,
        other => {
            return Err(CliError::Config(format!(
                "the zlearn subcommand needs method zlearn-baseline or zlearn-greedy, got {other:?}"
            )))
        }
    };
    let grid = match build_instance(&config.problem, config.seed)? {
        Instance::Tabular(t) => match t.origin {
            Origin::Gridworld(g) => g,
            _ => return Err(capability("Z-learning needs a linearly-solvable problem (gridworld-lmdp)")),
        },
        Instance::Gaussian(_) => return Err(capability("Z-learning needs a linearly-solvable problem (gridworld-lmdp)")),
    };
    let reference = solve_z_firstexit(&grid.spec)?.values();
    let spec = &config.zlearn;
    let zcfg = ZLearnConfig {
        mode,
        steps: spec.steps,
        step_constant: spec.step_constant,
        gamma: 1.0,
        seed: config.seed,
        report_every: spec.report_every,
    };
    let init = ZFunction::Tabular { z: vec![1.0; grid.spec.n_states()] };
    let result = zlearn(&grid.spec, init, &grid.p0, &zcfg, Some(&reference))?;
    let last = *result.curve.last().expect("final point is always recorded");
    let final_error = last.max_relative_error.expect("reference was given");
    let report = ZLearnReport {
        method: config.algorithm.method,
        steps: spec.steps,
        step_constant: spec.step_constant,
        final_max_relative_error: final_error,
        final_bellman_residual: last.bellman_residual,
        steps_to_5pct: result.steps_to(REPORT_TOLERANCE),
        episodes: result.episodes,
        floored_updates: result.floored,
        tolerance: spec.tolerance,
        pass: spec.tolerance.is_none_or(|t| final_error < t),
    };
    Ok(ZLearnRun { z_table: write_z_table(&result.z, 1.0), curve: result.curve, report })
}
