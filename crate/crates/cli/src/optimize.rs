//! Outer optimization loops. Every method evaluates at θ_k, records a curve
//! row, then moves to θ_{k+1}; iteration 0 is the starting point, so zero
//! iterations still yield one row.

use std::sync::Arc;
use std::time::Instant;

use dso_core::exact::{exact_gradient, objective};
use dso_core::rollout::{
    algorithm1_gradient, fit_value_approx, generate_rollouts, Baseline, ConstantFeature, ExpectedNextValue, Features,
    GradientEstimate, MeanStateBaseline, OneHot, QuadraticFeatures, RolloutBatch, Termination, ValueApprox,
};
use dso_core::surrogate::{
    chain_iteration_step, fisher_exact, fisher_gaussian, natural_gradient, pco_objective, spd_solve, surrogate_exact,
    surrogate_sampled, ChainIterationConfig, FisherMatrix, InnerOptimizer, SurrogateObjective,
};
use dso_core::{Chain, DsoError, DsoProblem, Setting, StateSpace, TabularProblem};
use log::warn;
use nalgebra::DVector;
use serde::Serialize;

use crate::build::{build_instance, Instance};
use crate::config::{AlgorithmSpec, ExperimentConfig, InnerKind, Method, StepRule, ValueFeatures};
use crate::error::{capability, CliError};
use crate::output::{CurveRow, LearningCurve};

/// Plain or Adam update of θ along a descent direction.
pub struct Stepper {
    rule: StepRule,
    step_size: f64,
    m: DVector<f64>,
    v: DVector<f64>,
    t: i32,
}

impl Stepper {
    pub fn new(rule: StepRule, step_size: f64, n: usize) -> Self {
        Self { rule, step_size, m: DVector::zeros(n), v: DVector::zeros(n), t: 0 }
    }

    pub fn apply(&mut self, theta: &mut [f64], direction: &DVector<f64>) {
        match self.rule {
            StepRule::Gd => {
                for (t, d) in theta.iter_mut().zip(direction.iter()) {
                    *t -= self.step_size * d;
                }
            }
            StepRule::Adam { beta1, beta2, eps } => {
                self.t += 1;
                self.m = &self.m * beta1 + direction * (1.0 - beta1);
                self.v = &self.v * beta2 + direction.component_mul(direction) * (1.0 - beta2);
                let c1 = 1.0 - beta1.powi(self.t);
                let c2 = 1.0 - beta2.powi(self.t);
                for (i, t) in theta.iter_mut().enumerate() {
                    *t -= self.step_size * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + eps);
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OptimizeReport {
    pub method: Method,
    pub problem: String,
    pub seed: u64,
    pub iterations: usize,
    pub initial_j: f64,
    pub final_j: f64,
    pub final_j_stderr: Option<f64>,
    pub final_theta: Vec<f64>,
    pub total_steps: usize,
    /// Surrogate steps rejected after inner divergence.
    pub rejected_steps: usize,
}

pub struct OptimizeRun {
    pub curve: LearningCurve,
    pub report: OptimizeReport,
    /// Last rollout batch as JSON lines, when requested.
    pub rollouts_jsonl: Option<String>,
}

/// Seed of the batch drawn at iteration `k`; distinct iterations get
/// unrelated ChaCha keys.
pub fn batch_seed(run_seed: u64, k: usize) -> u64 {
    run_seed ^ (k as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

fn termination(setting: Setting, cap: usize) -> Result<Termination, CliError> {
    match Termination::for_setting(setting) {
        Ok(Termination::Terminal { .. }) => Ok(Termination::Terminal { cap }),
        Ok(Termination::Geometric { gamma, .. }) => Ok(Termination::Geometric { gamma, cap }),
        Ok(t) => Ok(t),
        Err(_) => Err(capability("sampled methods need an episodic or finite-horizon setting, not average cost")),
    }
}

type BaselineFactory<'a, S> = Box<dyn Fn(&ValueApprox<S>) -> Result<Box<dyn Baseline<S>>, CliError> + 'a>;
type FisherFn<'a> = Box<dyn Fn(&[f64]) -> Result<FisherMatrix, DsoError> + 'a>;

/// Everything the generic loop needs to know about one problem family.
struct Driver<'a, S, C: ?Sized> {
    problem: &'a DsoProblem<S, C>,
    /// The same problem seen by the exact solvers, for tabular instances.
    exact: Option<&'a TabularProblem>,
    features: Arc<dyn Features<S>>,
    make_baseline: BaselineFactory<'a, S>,
    fisher: Option<FisherFn<'a>>,
}

struct Evaluation<S> {
    j: f64,
    j_stderr: Option<f64>,
    grad: DVector<f64>,
    batch: Option<RolloutBatch<S>>,
}

fn return_stats<S>(batch: &RolloutBatch<S>) -> (f64, f64) {
    let returns: Vec<DVector<f64>> = batch.rollouts.iter().map(|r| DVector::from_element(1, r.returns[0])).collect();
    let (m, se) = dso_core::stats::mean_and_stderr(&returns, 1);
    (m[0], se[0])
}

fn stationary(problem: Option<&TabularProblem>) -> Option<&TabularProblem> {
    problem.filter(|p| !matches!(p.setting, Setting::TimeVarying { .. }))
}

fn inner_config(alg: &AlgorithmSpec, kappa: f64) -> ChainIterationConfig {
    let inner = match alg.inner {
        InnerKind::Gd => InnerOptimizer::GradientDescent { initial_step: alg.step_size },
        InnerKind::Newton => InnerOptimizer::DampedNewton { damping: alg.damping },
    };
    ChainIterationConfig { inner, tol: 1e-8, max_inner: alg.inner_iterations, kappa }
}

fn newton_direction(h: &nalgebra::DMatrix<f64>, g: &DVector<f64>, damping: f64) -> DVector<f64> {
    match spd_solve(h, g, damping) {
        Ok((d, _)) => d,
        Err(e) => {
            warn!("surrogate Hessian solve failed ({e}); taking a gradient step");
            g.clone()
        }
    }
}

fn run_loop<S, C>(config: &ExperimentConfig, threads: Option<usize>, d: Driver<'_, S, C>) -> Result<OptimizeRun, CliError>
where
    S: StateSpace,
    C: Chain<S> + ?Sized,
{
    let alg = &config.algorithm;
    let problem = d.problem;
    let n = problem.n_params();
    let mut theta = match &alg.theta0 {
        Some(t) if t.len() == n => t.clone(),
        Some(t) => return Err(CliError::Config(format!("theta0 has {} entries, problem has {n}", t.len()))),
        None => vec![0.0; n],
    };
    match alg.method {
        Method::ExactGd if d.exact.is_none() => return Err(capability("exact-gd needs a tabular problem")),
        Method::Natural if d.fisher.is_none() => {
            return Err(capability("natural needs an exact Fisher matrix (stationary tabular or Gaussian problem)"))
        }
        Method::ZlearnBaseline | Method::ZlearnGreedy => {
            return Err(capability("zlearn methods need a gridworld-lmdp problem and the zlearn subcommand"))
        }
        _ => {}
    }
    let sampled = match alg.method {
        Method::ExactGd => false,
        Method::ChainIteration | Method::Natural | Method::NewtonSurrogate => stationary(d.exact).is_none(),
        Method::Alg1Sgd | Method::Pco => true,
        Method::ZlearnBaseline | Method::ZlearnGreedy => unreachable!("rejected above"),
    };
    let term = if sampled { Some(termination(problem.setting, alg.horizon_cap)?) } else { None };

    let mut stepper = Stepper::new(alg.step_rule, alg.step_size, n);
    let mut kappa = alg.kappa;
    let mut fitted: Option<ValueApprox<S>> = None;
    let mut curve = LearningCurve::default();
    let mut total_steps = 0usize;
    let mut rejected = 0usize;
    let mut last_batch: Option<RolloutBatch<S>> = None;
    let start = Instant::now();

    for k in 0..=alg.iterations {
        // the baseline only ever sees batches drawn before this one
        let baseline = match (&fitted, alg.baseline) {
            (Some(v), true) => Some((d.make_baseline)(v)?),
            _ => None,
        };
        let baseline_ref = baseline.as_deref();
        let eval = if let Some(term) = term {
            let batch = generate_rollouts(problem, &theta, alg.batch, term, batch_seed(config.seed, k), threads)?;
            if !batch.is_valid() {
                return Err(CliError::Runtime(DsoError::Diverged(format!(
                    "{} of {} at iteration {k}",
                    batch.diverged, batch.requested
                ))));
            }
            total_steps += batch.total_steps();
            let est: GradientEstimate = algorithm1_gradient(problem, &theta, &batch, baseline_ref)?;
            let (j, j_stderr) = match d.exact {
                Some(p) => (objective(p, &theta)?, None),
                None => {
                    let (m, se) = return_stats(&batch);
                    (m, Some(se))
                }
            };
            Evaluation { j, j_stderr, grad: est.mean, batch: Some(batch) }
        } else {
            let p = d.exact.expect("exact evaluation needs a tabular problem");
            Evaluation { j: objective(p, &theta)?, j_stderr: None, grad: exact_gradient(p, &theta)?, batch: None }
        };
        if !eval.j.is_finite() {
            return Err(CliError::Runtime(DsoError::Solve(format!("objective is not finite at iteration {k}"))));
        }
        let wall_ms = if config.output.record_wall_time { start.elapsed().as_millis() as u64 } else { 0 };
        curve.push(CurveRow {
            iter: k,
            j: eval.j,
            grad_norm: eval.grad.norm(),
            wall_ms,
            steps: total_steps,
            j_stderr: eval.j_stderr,
        })?;
        if k == alg.iterations {
            last_batch = eval.batch;
            break;
        }

        match alg.method {
            Method::ExactGd | Method::Alg1Sgd => stepper.apply(&mut theta, &eval.grad),
            Method::ChainIteration | Method::Pco => {
                let cfg = inner_config(alg, kappa);
                let report = match (&eval.batch, alg.method) {
                    (Some(batch), Method::Pco) => {
                        let inner = surrogate_sampled(problem, &theta, batch, baseline_ref)?;
                        chain_iteration_step(&pco_objective(inner, alg.clip_epsilon)?, &theta, &cfg)?
                    }
                    (Some(batch), _) => {
                        chain_iteration_step(&surrogate_sampled(problem, &theta, batch, baseline_ref)?, &theta, &cfg)?
                    }
                    (None, _) => {
                        let p = d.exact.expect("exact surrogate needs a tabular problem");
                        chain_iteration_step(&surrogate_exact(p, &theta)?, &theta, &cfg)?
                    }
                };
                if !report.accepted {
                    rejected += 1;
                }
                kappa = report.kappa;
                theta = report.theta;
            }
            Method::Natural => {
                let fisher = (d.fisher.as_ref().expect("checked above"))(&theta)?;
                stepper.apply(&mut theta, &natural_gradient(&eval.grad, &fisher, alg.damping)?);
            }
            Method::NewtonSurrogate => {
                let zero = vec![0.0; n];
                let h = match &eval.batch {
                    Some(batch) => surrogate_sampled(problem, &theta, batch, baseline_ref)?.hessian(&zero)?,
                    None => surrogate_exact(d.exact.expect("tabular"), &theta)?.hessian(&zero)?,
                };
                stepper.apply(&mut theta, &newton_direction(&h, &eval.grad, alg.damping));
            }
            Method::ZlearnBaseline | Method::ZlearnGreedy => unreachable!("rejected above"),
        }
        if theta.iter().any(|t| !t.is_finite()) {
            return Err(CliError::Runtime(DsoError::Solve(format!("parameters became non-finite at iteration {k}"))));
        }
        if alg.baseline {
            if let Some(batch) = &eval.batch {
                fitted = Some(fit_value_approx(batch, d.features.clone(), alg.ridge)?);
            }
        }
    }

    let rollouts_jsonl = match (&last_batch, config.output.write_rollouts) {
        (Some(batch), true) => {
            let mut buf = Vec::new();
            batch.write_jsonl(&mut buf)?;
            Some(String::from_utf8(buf).map_err(|e| CliError::Internal(e.to_string()))?)
        }
        _ => None,
    };
    let first = curve.rows()[0];
    let last = *curve.last().expect("at least one row");
    let report = OptimizeReport {
        method: alg.method,
        problem: config.problem.kind().into(),
        seed: config.seed,
        iterations: alg.iterations,
        initial_j: first.j,
        final_j: last.j,
        final_j_stderr: last.j_stderr,
        final_theta: theta,
        total_steps,
        rejected_steps: rejected,
    };
    Ok(OptimizeRun { curve, report, rollouts_jsonl })
}

pub fn run_optimize(config: &ExperimentConfig, threads: Option<usize>) -> Result<OptimizeRun, CliError> {
    let alg = &config.algorithm;
    match build_instance(&config.problem, config.seed)? {
        Instance::Tabular(t) => {
            let problem = &t.problem;
            let n_states = problem.n_states();
            let features: Arc<dyn Features<usize>> = match alg.value_features {
                ValueFeatures::OneHot => Arc::new(OneHot(n_states)),
                ValueFeatures::Constant => Arc::new(ConstantFeature),
                ValueFeatures::Quadratic if alg.baseline => {
                    return Err(capability("quadratic value features need continuous states"))
                }
                ValueFeatures::Quadratic => Arc::new(ConstantFeature),
            };
            let chain = problem.chain.clone();
            let make_baseline: BaselineFactory<'_, usize> = Box::new(move |v: &ValueApprox<usize>| {
                let values = (0..n_states).map(|x| v.predict(&x)).collect();
                Ok(Box::new(ExpectedNextValue::new(chain.clone(), values)?) as Box<dyn Baseline<usize>>)
            });
            let fisher: Option<FisherFn<'_>> = stationary(Some(problem))
                .map(|p| Box::new(move |th: &[f64]| fisher_exact(p, th)) as FisherFn<'_>);
            run_loop(config, threads, Driver { problem, exact: Some(problem), features, make_baseline, fisher })
        }
        Instance::Gaussian(problem) => {
            let dim = problem.chain.state_dim();
            let features: Arc<dyn Features<DVector<f64>>> = match alg.value_features {
                ValueFeatures::Quadratic => Arc::new(QuadraticFeatures(dim)),
                ValueFeatures::Constant => Arc::new(ConstantFeature),
                ValueFeatures::OneHot if alg.baseline => {
                    return Err(capability("one-hot value features need tabular states; use quadratic"))
                }
                ValueFeatures::OneHot => Arc::new(ConstantFeature),
            };
            let chain = problem.chain.clone();
            let make_baseline: BaselineFactory<'_, DVector<f64>> = Box::new(move |v: &ValueApprox<DVector<f64>>| {
                Ok(Box::new(MeanStateBaseline::new(chain.clone(), v.clone())) as Box<dyn Baseline<DVector<f64>>>)
            });
            let p = &problem;
            let fisher: Option<FisherFn<'_>> = Some(Box::new(move |th: &[f64]| fisher_gaussian(p, th)));
            run_loop(config, threads, Driver { problem: &problem, exact: None, features, make_baseline, fisher })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adam_first_step_moves_each_coordinate_by_the_step_size() {
        let rule = StepRule::Adam { beta1: 0.9, beta2: 0.999, eps: 1e-8 };
        let mut s = Stepper::new(rule, 0.1, 2);
        let mut theta = vec![1.0, 1.0];
        s.apply(&mut theta, &DVector::from_vec(vec![4.0, -0.5]));
        assert!((theta[0] - 0.9).abs() < 1e-6);
        assert!((theta[1] - 1.1).abs() < 1e-6);
    }

    #[test]
    fn batch_seeds_differ_per_iteration() {
        assert_ne!(batch_seed(7, 0), batch_seed(7, 1));
        assert_eq!(batch_seed(7, 3), batch_seed(7, 3));
    }
}
