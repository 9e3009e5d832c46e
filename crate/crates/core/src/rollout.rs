//! Sampled trajectories and the estimators built on them: the batch gradient
//! estimator with an optional baseline, value-function fitting, and the
//! whole-path gradient and Hessian for finite-horizon problems.

use std::io::{BufRead, Write};
use std::sync::Arc;

use log::warn;
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, DsoError, Result};
use crate::model::{Chain, DsoProblem, GaussianChain, Setting, StateSpace, TabularChain};
use crate::stats::{matrix_mean_and_stderr, mean_and_stderr};

/// Safety cap on rollouts that should end at a terminal state.
pub const DEFAULT_TERMINAL_CAP: usize = 10_000;

/// Fraction of diverged rollouts above which an estimate is flagged invalid.
pub const MAX_DIVERGED_FRACTION: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EndReason {
    Terminal,
    HorizonCap,
    GeometricStop,
}

/// How a rollout stops.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "mode")]
pub enum Termination {
    /// Run until a terminal state; rollouts hitting `cap` states are flagged.
    Terminal { cap: usize },
    /// Exactly `steps` transitions (`steps + 1` states), unless cut short.
    Horizon { steps: usize },
    /// After each state, stop with probability `1 - γ`; terminals also stop.
    /// The stopping rule carries the discount, so returns are undiscounted.
    Geometric { gamma: f64, cap: usize },
}

impl Termination {
    /// The natural termination for a setting (none for the average setting).
    pub fn for_setting(setting: Setting) -> Result<Self> {
        match setting {
            Setting::FirstExit => Ok(Self::Terminal { cap: DEFAULT_TERMINAL_CAP }),
            Setting::EpisodicDiscounted { gamma } => Ok(Self::Geometric { gamma, cap: DEFAULT_TERMINAL_CAP }),
            Setting::TimeVarying { horizon } => Ok(Self::Horizon { steps: horizon }),
            Setting::Average => Err(DsoError::Capability("average-cost problems have no episode end".into())),
        }
    }

    /// Discount applied inside returns for this termination under `setting`.
    pub fn effective_discount(&self, setting: Setting) -> f64 {
        match self {
            Self::Geometric { .. } => 1.0,
            _ => setting.gamma(),
        }
    }
}

/// One trajectory `x_0 .. x_K` with per-step costs, scores and returns.
#[derive(Debug, Clone, PartialEq)]
pub struct Rollout<S> {
    pub index: usize,
    pub states: Vec<S>,
    /// `L_t(x_t, θ)` for every state.
    pub costs: Vec<f64>,
    /// `∇θ ln P_t(x_{t+1}|x_t, θ)`; one fewer than states.
    pub scores: Vec<DVector<f64>>,
    /// `R_t = L_t + γ R_{t+1}`.
    pub returns: Vec<f64>,
    pub end: EndReason,
}

impl<S> Rollout<S> {
    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    /// Largest violation of the return recursion.
    pub fn return_residual(&self, gamma: f64) -> f64 {
        let k = self.costs.len();
        (0..k)
            .map(|t| {
                let next = if t + 1 < k { self.returns[t + 1] } else { 0.0 };
                (self.returns[t] - self.costs[t] - gamma * next).abs()
            })
            .fold(0.0, f64::max)
    }
}

/// Rollouts drawn at one parameter snapshot.
#[derive(Debug, Clone)]
pub struct RolloutBatch<S> {
    pub rollouts: Vec<Rollout<S>>,
    pub theta: Vec<f64>,
    pub seed: u64,
    pub setting: Setting,
    pub termination: Termination,
    /// Discount used in the returns.
    pub discount: f64,
    pub requested: usize,
    pub diverged: usize,
    /// Rollouts that hit the safety cap while waiting for a terminal state.
    pub capped: usize,
}

impl<S> RolloutBatch<S> {
    pub fn total_steps(&self) -> usize {
        self.rollouts.iter().map(|r| r.len()).sum()
    }

    pub fn is_valid(&self) -> bool {
        (self.diverged as f64) <= MAX_DIVERGED_FRACTION * self.requested as f64
    }

    fn check_snapshot(&self, theta: &[f64]) -> Result<()> {
        if self.theta.as_slice() != theta {
            return Err(DsoError::Staleness);
        }
        if self.rollouts.is_empty() {
            return invalid("batch has no usable rollouts");
        }
        Ok(())
    }
}

/// Per-rollout RNG: the batch seed selects the key, the rollout index the stream.
pub fn rollout_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

fn run_one<S, C>(
    problem: &DsoProblem<S, C>,
    theta: &[f64],
    termination: Termination,
    discount: f64,
    seed: u64,
    index: usize,
) -> Result<Option<Rollout<S>>>
where
    S: StateSpace,
    C: Chain<S> + ?Sized,
{
    let mut rng = rollout_rng(seed, index);
    let mut x = S::sample_initial(&problem.p0, &mut rng)?;
    let mut states = Vec::new();
    let mut costs = Vec::new();
    let mut scores = Vec::new();
    let mut t = 0;
    let end = loop {
        let cost = problem.cost.value(&x, theta, t);
        if !x.is_finite() || !cost.is_finite() {
            return Ok(None);
        }
        states.push(x.clone());
        costs.push(cost);
        let stop = match termination {
            Termination::Terminal { cap } => {
                if problem.chain.is_terminal(&x) {
                    Some(EndReason::Terminal)
                } else if states.len() >= cap {
                    Some(EndReason::HorizonCap)
                } else {
                    None
                }
            }
            Termination::Horizon { steps } => (t >= steps).then_some(EndReason::HorizonCap),
            Termination::Geometric { gamma, cap } => {
                if problem.chain.is_terminal(&x) {
                    Some(EndReason::Terminal)
                } else if rng.random::<f64>() >= gamma {
                    Some(EndReason::GeometricStop)
                } else if states.len() >= cap {
                    Some(EndReason::HorizonCap)
                } else {
                    None
                }
            }
        };
        if let Some(end) = stop {
            break end;
        }
        let next = problem.chain.sample(&x, theta, t, &mut rng);
        scores.push(problem.chain.score(&x, &next, theta, t));
        x = next;
        t += 1;
    };
    let mut returns = vec![0.0; costs.len()];
    let mut acc = 0.0;
    for k in (0..costs.len()).rev() {
        acc = costs[k] + discount * acc;
        returns[k] = acc;
    }
    Ok(Some(Rollout { index, states, costs, scores, returns, end }))
}

/// Draws `n` independent rollouts at θ.
///
/// Rollout `i` uses stream `i` of the seed, and results are collected in index
/// order, so the batch does not depend on `threads` (`None` = global pool).
pub fn generate_rollouts<S, C>(
    problem: &DsoProblem<S, C>,
    theta: &[f64],
    n: usize,
    termination: Termination,
    seed: u64,
    threads: Option<usize>,
) -> Result<RolloutBatch<S>>
where
    S: StateSpace,
    C: Chain<S> + ?Sized,
{
    if n == 0 {
        return invalid("a batch needs at least one rollout");
    }
    if theta.len() != problem.n_params() {
        return Err(DsoError::Dimension("θ does not match the problem".into()));
    }
    if let Termination::Geometric { gamma, .. } = termination {
        if !(0.0..=1.0).contains(&gamma) {
            return invalid("geometric stopping needs 0 ≤ γ ≤ 1");
        }
    }
    let discount = termination.effective_discount(problem.setting);
    let work = || -> Result<Vec<Option<Rollout<S>>>> {
        (0..n)
            .into_par_iter()
            .map(|i| run_one(problem, theta, termination, discount, seed, i))
            .collect()
    };
    let results = match threads {
        Some(k) => rayon::ThreadPoolBuilder::new()
            .num_threads(k)
            .build()
            .map_err(|e| DsoError::Config(format!("thread pool: {e}")))?
            .install(work)?,
        None => work()?,
    };
    let diverged = results.iter().filter(|r| r.is_none()).count();
    if diverged > 0 {
        warn!("{diverged} of {n} rollouts diverged and were dropped");
    }
    let rollouts: Vec<Rollout<S>> = results.into_iter().flatten().collect();
    let capped = match termination {
        Termination::Terminal { .. } => rollouts.iter().filter(|r| r.end == EndReason::HorizonCap).count(),
        _ => 0,
    };
    if capped > 0 {
        warn!("{capped} rollouts hit the step cap before a terminal state");
    }
    Ok(RolloutBatch {
        rollouts,
        theta: theta.to_vec(),
        seed,
        setting: problem.setting,
        termination,
        discount,
        requested: n,
        diverged,
        capped,
    })
}

/// One line of the batch record format.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutRecord<S> {
    pub seed: u64,
    pub index: usize,
    pub states: Vec<S>,
    pub costs: Vec<f64>,
    pub end: EndReason,
}

impl<S: StateSpace> RolloutBatch<S> {
    /// Writes one JSON object per rollout, one per line.
    pub fn write_jsonl<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        for r in &self.rollouts {
            let rec = RolloutRecord {
                seed: self.seed,
                index: r.index,
                states: r.states.clone(),
                costs: r.costs.clone(),
                end: r.end,
            };
            serde_json::to_writer(&mut out, &rec)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }
}

/// Reads records written by [`RolloutBatch::write_jsonl`].
pub fn read_jsonl<S: StateSpace, R: BufRead>(input: R) -> std::io::Result<Vec<RolloutRecord<S>>> {
    input
        .lines()
        .filter(|l| l.as_ref().map_or(true, |l| !l.trim().is_empty()))
        .map(|l| serde_json::from_str(&l?).map_err(std::io::Error::from))
        .collect()
}

/// State-dependent baseline `b(x, θ)` subtracted from next-step returns.
pub trait Baseline<S>: Send + Sync {
    fn value(&self, x: &S, theta: &[f64], t: usize) -> f64;
}

/// `b(x,θ) = Σ_{x'} P(x'|x,θ) V̂(x')` for tabular chains.
pub struct ExpectedNextValue {
    chain: Arc<dyn TabularChain>,
    values: Vec<f64>,
}

impl ExpectedNextValue {
    pub fn new(chain: Arc<dyn TabularChain>, values: Vec<f64>) -> Result<Self> {
        if values.len() != chain.n_states() {
            return invalid("one value per state is required");
        }
        Ok(Self { chain, values })
    }
}

impl Baseline<usize> for ExpectedNextValue {
    fn value(&self, x: &usize, theta: &[f64], t: usize) -> f64 {
        let row = self.chain.row(*x, theta, t);
        row.successors.iter().zip(&row.probs).map(|(s, p)| p * self.values[*s]).sum()
    }
}

/// `b(x,θ) = V̂(m(x,θ))` at the mean transition of a Gaussian chain.
pub struct MeanStateBaseline {
    chain: Arc<GaussianChain>,
    approx: ValueApprox<DVector<f64>>,
}

impl MeanStateBaseline {
    pub fn new(chain: Arc<GaussianChain>, approx: ValueApprox<DVector<f64>>) -> Self {
        Self { chain, approx }
    }
}

impl Baseline<DVector<f64>> for MeanStateBaseline {
    fn value(&self, x: &DVector<f64>, theta: &[f64], _t: usize) -> f64 {
        self.approx.predict(&self.chain.mean(x, theta))
    }
}

impl Baseline<usize> for ValueApprox<usize> {
    /// Fitted value of the current state; unbiased because it ignores `x'`.
    fn value(&self, x: &usize, _theta: &[f64], _t: usize) -> f64 {
        self.predict(x)
    }
}

/// Feature map for linear value approximation.
pub trait Features<S>: Send + Sync {
    fn dim(&self) -> usize;
    fn eval(&self, x: &S) -> DVector<f64>;
}

/// Indicator features over `n` tabular states.
#[derive(Debug, Clone, Copy)]
pub struct OneHot(pub usize);

impl Features<usize> for OneHot {
    fn dim(&self) -> usize {
        self.0
    }

    fn eval(&self, x: &usize) -> DVector<f64> {
        let mut v = DVector::zeros(self.0);
        v[*x] = 1.0;
        v
    }
}

/// The single feature `φ = 1`.
#[derive(Debug, Clone, Copy)]
pub struct ConstantFeature;

impl<S> Features<S> for ConstantFeature {
    fn dim(&self) -> usize {
        1
    }

    fn eval(&self, _x: &S) -> DVector<f64> {
        DVector::from_element(1, 1.0)
    }
}

/// `(1, x, upper triangle of x xᵀ)` for continuous states of dimension `n`.
#[derive(Debug, Clone, Copy)]
pub struct QuadraticFeatures(pub usize);

impl Features<DVector<f64>> for QuadraticFeatures {
    fn dim(&self) -> usize {
        1 + self.0 + self.0 * (self.0 + 1) / 2
    }

    fn eval(&self, x: &DVector<f64>) -> DVector<f64> {
        let mut v = Vec::with_capacity(self.dim());
        v.push(1.0);
        v.extend(x.iter());
        for i in 0..self.0 {
            for j in i..self.0 {
                v.push(x[i] * x[j]);
            }
        }
        DVector::from_vec(v)
    }
}

/// Linear value approximation `V̂(x) = ωᵀφ(x)`.
#[derive(Clone)]
pub struct ValueApprox<S> {
    pub features: Arc<dyn Features<S>>,
    pub weights: DVector<f64>,
    pub ridge: f64,
}

impl<S> ValueApprox<S> {
    pub fn predict(&self, x: &S) -> f64 {
        self.weights.dot(&self.features.eval(x))
    }
}

/// Discount-weighted ridge regression of returns on features:
/// `argmin Σ γ^t (ωᵀφ(x_t) - R_t)² + λ‖ω‖²`.
pub fn fit_value_approx<S: StateSpace>(
    batch: &RolloutBatch<S>,
    features: Arc<dyn Features<S>>,
    ridge: f64,
) -> Result<ValueApprox<S>> {
    if !(ridge >= 0.0 && ridge.is_finite()) {
        return invalid("ridge coefficient must be finite and nonnegative");
    }
    if batch.rollouts.is_empty() {
        return invalid("cannot fit values to an empty batch");
    }
    let k = features.dim();
    let mut a = DMatrix::identity(k, k) * ridge;
    let mut b = DVector::zeros(k);
    for r in &batch.rollouts {
        let mut w = 1.0;
        for (x, ret) in r.states.iter().zip(&r.returns) {
            let phi = features.eval(x);
            a.syger(w, &phi, &phi, 1.0);
            b.axpy(w * ret, &phi, 1.0);
            w *= batch.discount;
        }
    }
    let scale = a.diagonal().amax().max(f64::MIN_POSITIVE);
    let eig = a.clone().symmetric_eigen();
    if ridge == 0.0 && eig.eigenvalues.min() <= 1e-12 * scale {
        return Err(DsoError::RegularizationRequired);
    }
    let weights = a
        .cholesky()
        .ok_or(DsoError::RegularizationRequired)?
        .solve(&b);
    Ok(ValueApprox { features, weights, ridge })
}

/// Mean of per-rollout gradients with standard errors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradientEstimate {
    pub mean: DVector<f64>,
    pub stderr: DVector<f64>,
    pub n: usize,
    pub mean_return: f64,
    pub mean_length: f64,
    /// False when too many rollouts diverged.
    pub valid: bool,
    #[serde(skip)]
    pub per_rollout: Vec<DVector<f64>>,
}

fn summarize<S>(batch: &RolloutBatch<S>, per_rollout: Vec<DVector<f64>>, dim: usize) -> GradientEstimate {
    let (mean, stderr) = mean_and_stderr(&per_rollout, dim);
    let n = per_rollout.len();
    GradientEstimate {
        mean,
        stderr,
        n,
        mean_return: batch.rollouts.iter().map(|r| r.returns[0]).sum::<f64>() / n as f64,
        mean_length: batch.total_steps() as f64 / n as f64,
        valid: batch.is_valid(),
        per_rollout,
    }
}

/// Gradient of one rollout by the backward recursion
/// `G_t = γ G_{t+1} + ∇L_t(x_t) + γ s_t (R_{t+1} - b(x_t))`.
pub fn rollout_gradient<S, C>(
    problem: &DsoProblem<S, C>,
    theta: &[f64],
    rollout: &Rollout<S>,
    gamma: f64,
    baseline: Option<&dyn Baseline<S>>,
) -> DVector<f64>
where
    S: StateSpace,
    C: Chain<S> + ?Sized,
{
    let k = rollout.len();
    let mut g = DVector::zeros(problem.n_params());
    for t in (0..k).rev() {
        g *= gamma;
        g += problem.cost.grad(&rollout.states[t], theta, t);
        if t + 1 < k {
            let b = baseline.map_or(0.0, |b| b.value(&rollout.states[t], theta, t));
            g.axpy(gamma * (rollout.returns[t + 1] - b), &rollout.scores[t], 1.0);
        }
    }
    g
}

/// Batch gradient estimate: the mean of per-rollout gradients.
pub fn algorithm1_gradient<S, C>(
    problem: &DsoProblem<S, C>,
    theta: &[f64],
    batch: &RolloutBatch<S>,
    baseline: Option<&dyn Baseline<S>>,
) -> Result<GradientEstimate>
where
    S: StateSpace,
    C: Chain<S> + ?Sized,
{
    batch.check_snapshot(theta)?;
    if problem.setting == Setting::Average {
        return Err(DsoError::Capability("sampled gradients need an episodic or finite-horizon setting".into()));
    }
    let per: Vec<DVector<f64>> = batch
        .rollouts
        .iter()
        .map(|r| rollout_gradient(problem, theta, r, batch.discount, baseline))
        .collect();
    Ok(summarize(batch, per, problem.n_params()))
}

fn require_horizon(setting: Setting) -> Result<()> {
    match setting {
        Setting::TimeVarying { .. } => Ok(()),
        _ => invalid("path estimators need the time-varying setting"),
    }
}

struct PathTerms {
    score_sum: DVector<f64>,
    total_cost: f64,
    cost_grad: DVector<f64>,
}

fn path_terms<S, C>(problem: &DsoProblem<S, C>, theta: &[f64], r: &Rollout<S>) -> PathTerms
where
    S: StateSpace,
    C: Chain<S> + ?Sized,
{
    let n = problem.n_params();
    let mut score_sum = DVector::zeros(n);
    for s in &r.scores {
        score_sum += s;
    }
    let mut cost_grad = DVector::zeros(n);
    for (t, x) in r.states.iter().enumerate() {
        cost_grad += problem.cost.grad(x, theta, t);
    }
    PathTerms { score_sum, total_cost: r.costs.iter().sum(), cost_grad }
}

/// Whole-path estimator `(Σ_t s_t) ℒ + ∇ℒ` with `ℒ = Σ_t L_t(x_t)`.
pub fn path_gradient_timevarying<S, C>(
    problem: &DsoProblem<S, C>,
    theta: &[f64],
    batch: &RolloutBatch<S>,
) -> Result<GradientEstimate>
where
    S: StateSpace,
    C: Chain<S> + ?Sized,
{
    batch.check_snapshot(theta)?;
    require_horizon(problem.setting)?;
    let per: Vec<DVector<f64>> = batch
        .rollouts
        .iter()
        .map(|r| {
            let p = path_terms(problem, theta, r);
            p.score_sum * p.total_cost + p.cost_grad
        })
        .collect();
    Ok(summarize(batch, per, problem.n_params()))
}

/// Mean of per-rollout Hessians with entrywise standard errors.
#[derive(Debug, Clone, PartialEq)]
pub struct HessianEstimate {
    pub mean: DMatrix<f64>,
    pub stderr: DMatrix<f64>,
    pub n: usize,
}

/// Whole-path Hessian estimator
/// `(k kᵀ + ∇²𝒦) ℒ + k ∇ℒᵀ + ∇ℒ kᵀ + ∇²ℒ`, with `k = Σ_t s_t` and
/// `∇²𝒦 = Σ_t ∇² ln P_t`.
pub fn path_hessian_timevarying<S, C>(
    problem: &DsoProblem<S, C>,
    theta: &[f64],
    batch: &RolloutBatch<S>,
) -> Result<HessianEstimate>
where
    S: StateSpace,
    C: Chain<S> + ?Sized,
{
    batch.check_snapshot(theta)?;
    require_horizon(problem.setting)?;
    let n = problem.n_params();
    let missing = || DsoError::Capability("second derivatives are not available".into());
    let mut per = Vec::with_capacity(batch.rollouts.len());
    for r in &batch.rollouts {
        let p = path_terms(problem, theta, r);
        let mut score_hess = DMatrix::zeros(n, n);
        let mut cost_hess = DMatrix::zeros(n, n);
        for t in 0..r.len() {
            cost_hess += problem.cost.hessian(&r.states[t], theta, t).ok_or_else(missing)?;
            if t + 1 < r.len() {
                score_hess += problem
                    .chain
                    .score_hessian(&r.states[t], &r.states[t + 1], theta, t)
                    .ok_or_else(missing)?;
            }
        }
        let k = &p.score_sum;
        let cross = k * p.cost_grad.transpose();
        let h = (k * k.transpose() + score_hess) * p.total_cost + &cross + cross.transpose() + cost_hess;
        per.push(h);
    }
    let (mean, stderr) = matrix_mean_and_stderr(&per, n, n);
    let mean = (&mean + mean.transpose()) * 0.5;
    Ok(HessianEstimate { mean, stderr, n: per.len() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::exact::exact_gradient;
    use crate::model::{make_softmax_chain, FixedChain, InitialDistribution, TableCost, TabularProblem};

    fn canonical() -> TabularProblem {
        let chain = Arc::new(make_softmax_chain(2, &[vec![0, 1], vec![1]], &[1]).unwrap());
        let cost = Arc::new(TableCost::new(vec![1.0, 0.0], 2));
        TabularProblem::new(chain, cost, Setting::FirstExit, InitialDistribution::point(2, 0)).unwrap()
    }

    #[test]
    fn terminal_start_gives_single_state_rollouts() {
        let mut pr = canonical();
        pr.p0 = InitialDistribution::point(2, 1);
        let batch = generate_rollouts(&pr, &[0.0, 0.0], 50, Termination::for_setting(pr.setting).unwrap(), 1, None).unwrap();
        assert!(batch.rollouts.iter().all(|r| r.len() == 1 && r.end == EndReason::Terminal));
    }

    #[test]
    fn batches_do_not_depend_on_thread_count() {
        let pr = canonical();
        let term = Termination::for_setting(pr.setting).unwrap();
        let a = generate_rollouts(&pr, &[0.2, -0.1], 300, term, 9, Some(1)).unwrap();
        let b = generate_rollouts(&pr, &[0.2, -0.1], 300, term, 9, Some(4)).unwrap();
        assert_eq!(a.rollouts, b.rollouts);
    }

    #[test]
    fn returns_satisfy_the_recursion() {
        let pr = canonical();
        let batch = generate_rollouts(&pr, &[0.0, 0.0], 100, Termination::Terminal { cap: 100 }, 3, None).unwrap();
        for r in &batch.rollouts {
            assert!(r.return_residual(batch.discount) < 1e-12);
        }
    }

    #[test]
    fn stale_parameters_are_rejected() {
        let pr = canonical();
        let batch = generate_rollouts(&pr, &[0.0, 0.0], 10, Termination::Terminal { cap: 100 }, 3, None).unwrap();
        let err = algorithm1_gradient(&pr, &[0.1, 0.0], &batch, None).unwrap_err();
        assert_eq!(err, DsoError::Staleness);
    }

    #[test]
    fn canonical_estimate_is_near_exact() {
        let pr = canonical();
        let theta = [0.0, 0.0];
        let batch = generate_rollouts(&pr, &theta, 10_000, Termination::Terminal { cap: 10_000 }, 11, None).unwrap();
        let est = algorithm1_gradient(&pr, &theta, &batch, None).unwrap();
        let exact = exact_gradient(&pr, &theta).unwrap();
        for i in 0..2 {
            assert!((est.mean[i] - exact[i]).abs() < 4.0 * est.stderr[i], "{} vs {}", est.mean, exact);
        }
    }

    #[test]
    fn constant_feature_fits_weighted_mean_return() {
        let pr = canonical();
        let batch = generate_rollouts(&pr, &[0.0, 0.0], 200, Termination::Terminal { cap: 1000 }, 5, None).unwrap();
        let fit = fit_value_approx(&batch, Arc::new(ConstantFeature), 0.0).unwrap();
        let all: Vec<f64> = batch.rollouts.iter().flat_map(|r| r.returns.clone()).collect();
        let mean = all.iter().sum::<f64>() / all.len() as f64;
        assert!((fit.weights[0] - mean).abs() < 1e-10);
    }

    #[test]
    fn unvisited_one_hot_features_need_a_ridge() {
        let pr = canonical();
        let batch = generate_rollouts(&pr, &[0.0, 0.0], 20, Termination::Terminal { cap: 1000 }, 5, None).unwrap();
        let err = fit_value_approx(&batch, Arc::new(OneHot(3)), 0.0).err().unwrap();
        assert_eq!(err, DsoError::RegularizationRequired);
    }

    #[test]
    fn fixed_chain_estimate_is_discounted_cost_gradient() {
        let m = DMatrix::from_row_slice(2, 2, &[0.5, 0.5, 0.5, 0.5]);
        let chain = Arc::new(FixedChain::from_dense(&m, vec![], 1).unwrap());
        let cost = Arc::new(crate::model::QuadraticCost::new(
            1,
            vec![vec![
                crate::model::QuadraticTerm { constant: 0.0, linear: DVector::from_element(1, 1.0), quadratic: DMatrix::zeros(1, 1) },
                crate::model::QuadraticTerm { constant: 0.0, linear: DVector::from_element(1, 2.0), quadratic: DMatrix::zeros(1, 1) },
            ]],
        ).unwrap());
        let pr = TabularProblem::new(chain, cost, Setting::TimeVarying { horizon: 3 }, InitialDistribution::uniform(2)).unwrap();
        let batch = generate_rollouts(&pr, &[0.0], 5, Termination::Horizon { steps: 3 }, 2, None).unwrap();
        let est = algorithm1_gradient(&pr, &[0.0], &batch, None).unwrap();
        for (r, g) in batch.rollouts.iter().zip(&est.per_rollout) {
            let expected: f64 = r.states.iter().map(|&x| if x == 0 { 1.0 } else { 2.0 }).sum();
            assert!((g[0] - expected).abs() < 1e-14);
        }
    }
}
