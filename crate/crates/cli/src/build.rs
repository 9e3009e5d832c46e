//! Turns a problem spec into a ready-to-run instance.

use std::sync::Arc;

use dso_core::mdp::{map_lmdp, map_smdp, SoftmaxPolicy, TabularMdp};
use dso_core::problems::{
    canonical_two_state, gaussian_linear, gridworld_lmdp, random_smdp, random_tabular, GaussianProblem, Gridworld,
    GridworldOptions, RandomTabular,
};
use dso_core::zlearn::ZChain;
use dso_core::{InitialDistribution, Setting, TabularProblem};

use crate::config::{ProblemSpec, SettingKind};
use crate::error::CliError;

pub fn setting_of(kind: SettingKind, gamma: f64) -> Setting {
    match kind {
        SettingKind::Discounted => Setting::EpisodicDiscounted { gamma },
        SettingKind::FirstExit => Setting::FirstExit,
        SettingKind::Average => Setting::Average,
    }
}

/// Extra structure kept next to a tabular problem for oracles and Z-learning.
pub enum Origin {
    Chain,
    Smdp { mdp: Arc<TabularMdp>, policy: Arc<SoftmaxPolicy> },
    Gridworld(Box<Gridworld>),
}

pub struct TabularInstance {
    pub problem: TabularProblem,
    pub origin: Origin,
}

pub enum Instance {
    Tabular(TabularInstance),
    Gaussian(GaussianProblem),
}

impl Instance {
    pub fn n_params(&self) -> usize {
        match self {
            Self::Tabular(t) => t.problem.n_params(),
            Self::Gaussian(g) => g.n_params(),
        }
    }

    pub fn setting(&self) -> Setting {
        match self {
            Self::Tabular(t) => t.problem.setting,
            Self::Gaussian(g) => g.setting,
        }
    }
}

/// Builds the instance; `run_seed` is used unless the problem config pins a seed.
pub fn build_instance(spec: &ProblemSpec, run_seed: u64) -> Result<Instance, CliError> {
    let seed = spec.instance_seed().unwrap_or(run_seed);
    let instance = match *spec {
        ProblemSpec::SoftmaxTabular { canonical: true, .. } => {
            Instance::Tabular(TabularInstance { problem: canonical_two_state(), origin: Origin::Chain })
        }
        ProblemSpec::SoftmaxTabular { n_states, setting, gamma, .. } => {
            let problem = random_tabular(&RandomTabular::new(n_states, setting_of(setting, gamma), seed))?;
            Instance::Tabular(TabularInstance { problem, origin: Origin::Chain })
        }
        ProblemSpec::TimevaryingTabular { n_states, horizon, .. } => {
            let problem = random_tabular(&RandomTabular::new(n_states, Setting::TimeVarying { horizon }, seed))?;
            Instance::Tabular(TabularInstance { problem, origin: Origin::Chain })
        }
        ProblemSpec::SmdpRandom { n_states, n_actions, setting, gamma, .. } => {
            let first_exit = setting == SettingKind::FirstExit;
            let mdp = Arc::new(random_smdp(n_states, n_actions, first_exit, seed)?);
            let policy = Arc::new(SoftmaxPolicy::new(n_states, n_actions));
            let p0 = if first_exit {
                let w = 1.0 / (n_states - 1) as f64;
                InitialDistribution::tabular((0..n_states).map(|x| if x + 1 == n_states { 0.0 } else { w }).collect())?
            } else {
                InitialDistribution::uniform(n_states)
            };
            let problem = map_smdp(mdp.clone(), policy.clone(), setting_of(setting, gamma), p0)?;
            Instance::Tabular(TabularInstance { problem, origin: Origin::Smdp { mdp, policy } })
        }
        ProblemSpec::GridworldLmdp { width, height, obstacles, step_cost, obstacle_cost, .. } => {
            let grid = gridworld_lmdp(&GridworldOptions {
                width,
                height,
                n_obstacles: obstacles,
                step_cost,
                obstacle_cost,
                seed,
            })?;
            let chain = ZChain::tabular(&grid.spec, 1.0)?;
            let problem =
                map_lmdp(&grid.spec, chain.chain, Setting::FirstExit, InitialDistribution::tabular(grid.p0.clone())?)?;
            Instance::Tabular(TabularInstance { problem, origin: Origin::Gridworld(Box::new(grid)) })
        }
        ProblemSpec::GaussianLinear { state_dim, action_dim, gamma, .. } => {
            Instance::Gaussian(gaussian_linear(state_dim, action_dim, gamma, seed)?)
        }
    };
    Ok(instance)
}
