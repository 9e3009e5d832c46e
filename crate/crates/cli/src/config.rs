//! Experiment configuration: one JSON document per run. Unknown fields are
//! rejected everywhere so typos fail loudly instead of silently defaulting.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub problem: ProblemSpec,
    /// Seed for instance generation (unless the problem pins its own) and for
    /// every random stream of the run. `--seed` overrides it.
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub algorithm: AlgorithmSpec,
    #[serde(default)]
    pub grad_check: GradCheckSpec,
    #[serde(default)]
    pub equiv: EquivSpec,
    #[serde(default)]
    pub zlearn: ZLearnSpec,
    #[serde(default)]
    pub output: OutputSpec,
}

/// The stationary settings a tabular problem can be posed in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SettingKind {
    Discounted,
    FirstExit,
    Average,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum ProblemSpec {
    /// Random log-linear chain with one softmax logit per edge, or the
    /// two-state exit problem when `canonical` is set.
    SoftmaxTabular {
        #[serde(default)]
        canonical: bool,
        #[serde(default = "default_states")]
        n_states: usize,
        #[serde(default = "default_setting")]
        setting: SettingKind,
        #[serde(default = "default_gamma")]
        gamma: f64,
        #[serde(default)]
        seed: Option<u64>,
    },
    TimevaryingTabular {
        #[serde(default = "default_states")]
        n_states: usize,
        #[serde(default = "default_horizon")]
        horizon: usize,
        #[serde(default)]
        seed: Option<u64>,
    },
    /// Random MDP under a softmax policy, seen as a parameterized chain.
    SmdpRandom {
        #[serde(default = "default_states")]
        n_states: usize,
        #[serde(default = "default_actions")]
        n_actions: usize,
        #[serde(default = "default_setting")]
        setting: SettingKind,
        #[serde(default = "default_gamma")]
        gamma: f64,
        #[serde(default)]
        seed: Option<u64>,
    },
    /// Passive random walk on a grid with costly obstacle cells; the chain is
    /// parameterized by the energy table `E = -ln Z`.
    GridworldLmdp {
        #[serde(default = "default_side")]
        width: usize,
        #[serde(default = "default_side")]
        height: usize,
        #[serde(default = "default_obstacles")]
        obstacles: usize,
        #[serde(default = "default_step_cost")]
        step_cost: f64,
        #[serde(default = "default_obstacle_cost")]
        obstacle_cost: f64,
        #[serde(default)]
        seed: Option<u64>,
    },
    GaussianLinear {
        #[serde(default = "default_state_dim")]
        state_dim: usize,
        #[serde(default = "default_action_dim")]
        action_dim: usize,
        #[serde(default = "default_gamma")]
        gamma: f64,
        #[serde(default)]
        seed: Option<u64>,
    },
}

fn default_states() -> usize {
    6
}
fn default_actions() -> usize {
    3
}
fn default_setting() -> SettingKind {
    SettingKind::FirstExit
}
fn default_gamma() -> f64 {
    0.9
}
fn default_horizon() -> usize {
    10
}
fn default_side() -> usize {
    5
}
fn default_obstacles() -> usize {
    3
}
fn default_step_cost() -> f64 {
    0.1
}
fn default_obstacle_cost() -> f64 {
    0.5
}
fn default_state_dim() -> usize {
    2
}
fn default_action_dim() -> usize {
    1
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    ExactGd,
    Alg1Sgd,
    ChainIteration,
    Pco,
    Natural,
    NewtonSurrogate,
    ZlearnBaseline,
    ZlearnGreedy,
}

/// Update rule applied to a (natural or plain) descent direction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum StepRule {
    Gd,
    Adam {
        #[serde(default = "default_beta1")]
        beta1: f64,
        #[serde(default = "default_beta2")]
        beta2: f64,
        #[serde(default = "default_adam_eps")]
        eps: f64,
    },
}

fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_adam_eps() -> f64 {
    1e-8
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ValueFeatures {
    /// Indicator per state (tabular problems).
    OneHot,
    Constant,
    /// `(1, x, x xᵀ)` (continuous problems).
    Quadratic,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InnerKind {
    Gd,
    Newton,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AlgorithmSpec {
    pub method: Method,
    pub iterations: usize,
    pub step_size: f64,
    pub step_rule: StepRule,
    /// Rollouts per batch.
    pub batch: usize,
    /// Safety cap on rollout length while waiting for a terminal state.
    pub horizon_cap: usize,
    /// PCO clip ε, in (0, 1).
    pub clip_epsilon: f64,
    /// Tikhonov damping for Fisher and Newton solves.
    pub damping: f64,
    pub baseline: bool,
    pub value_features: ValueFeatures,
    pub ridge: f64,
    /// Inner minimizer of surrogate methods.
    pub inner: InnerKind,
    pub inner_iterations: usize,
    /// Fraction of the surrogate minimizer applied per outer step.
    pub kappa: f64,
    /// Starting parameters; zeros when absent.
    pub theta0: Option<Vec<f64>>,
}

impl Default for AlgorithmSpec {
    fn default() -> Self {
        Self {
            method: Method::ExactGd,
            iterations: 100,
            step_size: 0.1,
            step_rule: StepRule::Gd,
            batch: 256,
            horizon_cap: 10_000,
            clip_epsilon: 0.2,
            damping: 1e-3,
            baseline: false,
            value_features: ValueFeatures::OneHot,
            ridge: 1e-6,
            inner: InnerKind::Gd,
            inner_iterations: 20,
            kappa: 1.0,
            theta0: None,
        }
    }
}

/// Adds `value` to one analytic gradient coordinate before comparison; used
/// to confirm that the checker localizes a planted error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InjectedBias {
    pub coordinate: usize,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GradCheckSpec {
    pub fd_step: f64,
    pub tolerance: f64,
    /// Evaluation point; drawn from the seed when absent.
    pub theta: Option<Vec<f64>>,
    pub theta_scale: f64,
    pub inject_bias: Option<InjectedBias>,
}

impl Default for GradCheckSpec {
    fn default() -> Self {
        Self { fd_step: 1e-5, tolerance: 1e-5, theta: None, theta_scale: 0.5, inject_bias: None }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EquivPair {
    SmdpDmdp,
    LmdpDmdp,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EquivSpec {
    pub pair: EquivPair,
    pub n_states: usize,
    pub n_actions: usize,
    pub setting: SettingKind,
    pub gamma: f64,
    pub tolerance: f64,
}

impl Default for EquivSpec {
    fn default() -> Self {
        Self {
            pair: EquivPair::SmdpDmdp,
            n_states: 6,
            n_actions: 3,
            setting: SettingKind::Discounted,
            gamma: 0.9,
            tolerance: 1e-10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ZLearnSpec {
    pub steps: usize,
    pub step_constant: f64,
    pub report_every: usize,
    /// Exit with a check failure when the final relative error exceeds this.
    pub tolerance: Option<f64>,
}

impl Default for ZLearnSpec {
    fn default() -> Self {
        Self { steps: 100_000, step_constant: 100.0, report_every: 1000, tolerance: None }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputSpec {
    /// Real timings in the `wall_ms` column; off by default so reruns are
    /// byte-identical.
    pub record_wall_time: bool,
    /// Write the last rollout batch as JSON lines.
    pub write_rollouts: bool,
}

impl ProblemSpec {
    pub fn kind(&self) -> &'static str {
        match self {
            Self::SoftmaxTabular { .. } => "softmax-tabular",
            Self::TimevaryingTabular { .. } => "timevarying-tabular",
            Self::SmdpRandom { .. } => "smdp-random",
            Self::GridworldLmdp { .. } => "gridworld-lmdp",
            Self::GaussianLinear { .. } => "gaussian-linear",
        }
    }

    pub fn instance_seed(&self) -> Option<u64> {
        match self {
            Self::SoftmaxTabular { seed, .. }
            | Self::TimevaryingTabular { seed, .. }
            | Self::SmdpRandom { seed, .. }
            | Self::GridworldLmdp { seed, .. }
            | Self::GaussianLinear { seed, .. } => *seed,
        }
    }
}

fn check(ok: bool, msg: impl FnOnce() -> String) -> Result<(), CliError> {
    if ok {
        Ok(())
    } else {
        Err(CliError::Config(msg()))
    }
}

fn check_gamma(gamma: f64, setting: SettingKind) -> Result<(), CliError> {
    match setting {
        SettingKind::Discounted => check((0.0..1.0).contains(&gamma), || {
            format!("discounted problems need γ in [0, 1), got {gamma}")
        }),
        _ => Ok(()),
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self, CliError> {
        let config: Self = serde_json::from_str(text).map_err(|e| CliError::Config(format!("config: {e}")))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Range checks that serde cannot express.
    pub fn validate(&self) -> Result<(), CliError> {
        match &self.problem {
            ProblemSpec::SoftmaxTabular { canonical, n_states, setting, gamma, .. } => {
                check(*canonical || *n_states >= 2, || "softmax-tabular needs n_states ≥ 2".into())?;
                check(!*canonical || *setting == SettingKind::FirstExit, || {
                    "the canonical problem is first-exit".into()
                })?;
                check_gamma(*gamma, *setting)?;
            }
            ProblemSpec::TimevaryingTabular { n_states, horizon, .. } => {
                check(*n_states >= 2, || "timevarying-tabular needs n_states ≥ 2".into())?;
                check(*horizon >= 1, || "horizon must be at least 1".into())?;
            }
            ProblemSpec::SmdpRandom { n_states, n_actions, setting, gamma, .. } => {
                check(*n_states >= 2 && *n_actions >= 1, || "smdp-random needs n_states ≥ 2, n_actions ≥ 1".into())?;
                check_gamma(*gamma, *setting)?;
            }
            ProblemSpec::GridworldLmdp { width, height, obstacles, step_cost, obstacle_cost, .. } => {
                check(width * height >= 2, || "gridworld needs at least two cells".into())?;
                check(obstacles + 2 <= width * height, || "too many obstacles for the grid".into())?;
                check(step_cost.is_finite() && obstacle_cost.is_finite(), || "gridworld costs must be finite".into())?;
            }
            ProblemSpec::GaussianLinear { state_dim, action_dim, gamma, .. } => {
                check(*state_dim >= 1 && *action_dim >= 1, || "Gaussian dimensions must be positive".into())?;
                check_gamma(*gamma, SettingKind::Discounted)?;
            }
        }
        let a = &self.algorithm;
        check(a.batch >= 1, || "batch must be at least 1".into())?;
        check(a.horizon_cap >= 1, || "horizon_cap must be at least 1".into())?;
        check(a.step_size > 0.0 && a.step_size.is_finite(), || format!("step_size must be positive, got {}", a.step_size))?;
        check(a.clip_epsilon > 0.0 && a.clip_epsilon < 1.0, || {
            format!("clip_epsilon must lie in (0, 1), got {}", a.clip_epsilon)
        })?;
        check(a.damping >= 0.0 && a.damping.is_finite(), || "damping must be nonnegative".into())?;
        check(a.ridge >= 0.0 && a.ridge.is_finite(), || "ridge must be nonnegative".into())?;
        check(a.kappa > 0.0 && a.kappa <= 1.0, || format!("kappa must lie in (0, 1], got {}", a.kappa))?;
        if let StepRule::Adam { beta1, beta2, eps } = a.step_rule {
            check((0.0..1.0).contains(&beta1) && (0.0..1.0).contains(&beta2) && eps > 0.0, || {
                "Adam needs β1, β2 in [0, 1) and ε > 0".into()
            })?;
        }
        let g = &self.grad_check;
        check(g.fd_step > 0.0 && g.tolerance > 0.0, || "grad_check needs positive fd_step and tolerance".into())?;
        let e = &self.equiv;
        check(e.n_states >= 2 && e.n_actions >= 1, || "equiv needs n_states ≥ 2, n_actions ≥ 1".into())?;
        check_gamma(e.gamma, e.setting)?;
        let z = &self.zlearn;
        check(z.step_constant > 0.0, || "zlearn step_constant must be positive".into())?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_config_fills_defaults() {
        let c = ExperimentConfig::from_json(r#"{"problem": {"kind": "softmax-tabular", "canonical": true}}"#).unwrap();
        assert_eq!(c.algorithm.method, Method::ExactGd);
        assert_eq!(c.seed, 0);
    }

    #[test]
    fn unknown_fields_are_rejected_at_every_level() {
        for text in [
            r#"{"problem": {"kind": "softmax-tabular"}, "extra": 1}"#,
            r#"{"problem": {"kind": "softmax-tabular", "n_state": 4}}"#,
            r#"{"problem": {"kind": "softmax-tabular"}, "algorithm": {"stepsize": 0.1}}"#,
            r#"{"problem": {"kind": "softmax-tabular"}, "algorithm": {"step_rule": {"kind": "adam", "beta": 0.9}}}"#,
        ] {
            assert!(matches!(ExperimentConfig::from_json(text), Err(CliError::Config(_))), "{text}");
        }
    }

    #[test]
    fn clip_epsilon_outside_unit_interval_is_rejected() {
        let text = r#"{"problem": {"kind": "gaussian-linear"}, "algorithm": {"method": "pco", "clip_epsilon": 1.5}}"#;
        assert!(matches!(ExperimentConfig::from_json(text), Err(CliError::Config(_))));
    }

    #[test]
    fn serialized_config_parses_back_unchanged() {
        let text = r#"{
            "problem": {"kind": "smdp-random", "n_states": 4, "setting": "average"},
            "seed": 9,
            "algorithm": {"method": "natural", "step_rule": {"kind": "adam"}, "theta0": [0.5]},
            "grad_check": {"inject_bias": {"coordinate": 1, "value": 0.001}}
        }"#;
        let c = ExperimentConfig::from_json(text).unwrap();
        assert_eq!(ExperimentConfig::from_json(&c.to_json()).unwrap(), c);
    }
}
