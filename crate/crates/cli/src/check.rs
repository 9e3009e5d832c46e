//! Verification runs: exact gradients against finite differences and
//! classical oracles, and the action-free equivalence constructions.

use std::sync::Arc;

use dso_core::exact::{cost_vector, exact_gradient, objective, transition_matrix};
use dso_core::fd::{fd_gradient, relative_errors};
use dso_core::mdp::{build_dmdp_from_smdp, build_dmdp_lmdp_pair, map_smdp, smdp_policy_gradient_oracle, SoftmaxPolicy};
use dso_core::problems::{random_lmdp, random_smdp, random_theta};
use dso_core::{InitialDistribution, TabularProblem};
use serde::Serialize;

use crate::build::{build_instance, setting_of, Instance, Origin};
use crate::config::{EquivPair, ExperimentConfig, SettingKind};
use crate::error::{capability, CliError};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CoordinateCheck {
    pub index: usize,
    pub analytic: f64,
    pub finite_difference: f64,
    pub relative_error: f64,
    pub pass: bool,
}

/// Classical gradient formula evaluated on the same instance.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OracleCheck {
    pub name: String,
    pub max_abs_difference: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub problem: String,
    pub theta: Vec<f64>,
    pub objective: f64,
    pub coordinates: Vec<CoordinateCheck>,
    pub max_relative_error: f64,
    pub tolerance: f64,
    pub oracle: Option<OracleCheck>,
    pub pass: bool,
}

impl GradCheckReport {
    /// Coordinates that exceed the tolerance.
    pub fn failing(&self) -> Vec<usize> {
        self.coordinates.iter().filter(|c| !c.pass).map(|c| c.index).collect()
    }
}

const ORACLE_TOL: f64 = 1e-10;

pub fn run_gradcheck(config: &ExperimentConfig) -> Result<GradCheckReport, CliError> {
    let spec = &config.grad_check;
    let instance = match build_instance(&config.problem, config.seed)? {
        Instance::Tabular(t) => t,
        Instance::Gaussian(_) => {
            return Err(capability("grad-check needs a tabular problem with an exact objective"));
        }
    };
    let problem = &instance.problem;
    let n = problem.n_params();
    let theta = match &spec.theta {
        Some(t) if t.len() == n => t.clone(),
        Some(t) => return Err(CliError::Config(format!("grad_check.theta has {} entries, problem has {n}", t.len()))),
        None => random_theta(n, config.seed, spec.theta_scale),
    };
    let mut analytic = exact_gradient(problem, &theta)?;
    if let Some(bias) = spec.inject_bias {
        if bias.coordinate >= n {
            return Err(CliError::Config(format!("inject_bias coordinate {} out of range", bias.coordinate)));
        }
        analytic[bias.coordinate] += bias.value;
    }
    let fd = fd_gradient(problem, &theta, spec.fd_step)?;
    let errors = relative_errors(&analytic, &fd);
    let coordinates: Vec<CoordinateCheck> = errors
        .iter()
        .enumerate()
        .map(|(i, &e)| CoordinateCheck {
            index: i,
            analytic: analytic[i],
            finite_difference: fd[i],
            relative_error: e,
            pass: e < spec.tolerance,
        })
        .collect();
    let max_relative_error = errors.iter().copied().fold(0.0, f64::max);
    let oracle = match &instance.origin {
        Origin::Smdp { mdp, policy } => {
            let o = smdp_policy_gradient_oracle(mdp, policy.as_ref(), problem.setting, problem.p0_weights(), &theta)?;
            let diff = (&analytic - o).amax();
            Some(OracleCheck { name: "state-action policy gradient".into(), max_abs_difference: diff, pass: diff < ORACLE_TOL })
        }
        _ => None,
    };
    let pass = max_relative_error < spec.tolerance && oracle.as_ref().is_none_or(|o| o.pass);
    Ok(GradCheckReport {
        problem: config.problem.kind().into(),
        objective: objective(problem, &theta)?,
        theta,
        coordinates,
        max_relative_error,
        tolerance: spec.tolerance,
        oracle,
        pass,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EquivReport {
    pub pair: EquivPair,
    pub n_states: usize,
    pub n_actions: usize,
    pub max_abs_dp: f64,
    pub max_abs_dl: f64,
    pub abs_dj: f64,
    pub max_abs_dgrad: f64,
    pub tolerance: f64,
    pub pass: bool,
}

/// Largest differences in transition matrix, cost vector, objective and gradient.
pub fn compare_problems(a: &TabularProblem, b: &TabularProblem, theta: &[f64]) -> Result<[f64; 4], CliError> {
    let dp = (transition_matrix(a.chain.as_ref(), theta, 0) - transition_matrix(b.chain.as_ref(), theta, 0)).amax();
    let dl = (cost_vector(a, theta, 0) - cost_vector(b, theta, 0)).amax();
    let dj = (objective(a, theta)? - objective(b, theta)?).abs();
    let dg = (exact_gradient(a, theta)? - exact_gradient(b, theta)?).amax();
    Ok([dp, dl, dj, dg])
}

pub fn run_equivcheck(config: &ExperimentConfig) -> Result<EquivReport, CliError> {
    let spec = &config.equiv;
    let (n, m) = (spec.n_states, spec.n_actions);
    let first_exit = spec.setting == SettingKind::FirstExit;
    let setting = setting_of(spec.setting, spec.gamma);
    let p0 = if first_exit {
        InitialDistribution::point(n, 0)
    } else {
        InitialDistribution::uniform(n)
    };
    let mdp = Arc::new(random_smdp(n, m, first_exit, config.seed)?);
    let policy = Arc::new(SoftmaxPolicy::new(n, m));
    let theta = random_theta(n * m, config.seed, 0.5);
    let (a, b) = match spec.pair {
        EquivPair::SmdpDmdp => {
            let s = map_smdp(mdp.clone(), policy.clone(), setting, p0.clone())?;
            let (_, d) = build_dmdp_from_smdp(mdp, policy, setting, p0)?;
            (s, d)
        }
        EquivPair::LmdpDmdp => {
            let lmdp = random_lmdp(n, first_exit, config.seed)?;
            build_dmdp_lmdp_pair(mdp.transitions(), policy, lmdp.baseline, lmdp.r, setting, p0)?
        }
    };
    let [dp, dl, dj, dg] = compare_problems(&a, &b, &theta)?;
    let pass = [dp, dl, dj, dg].iter().all(|d| *d < spec.tolerance);
    Ok(EquivReport {
        pair: spec.pair,
        n_states: n,
        n_actions: m,
        max_abs_dp: dp,
        max_abs_dl: dl,
        abs_dj: dj,
        max_abs_dgrad: dg,
        tolerance: spec.tolerance,
        pass,
    })
}
