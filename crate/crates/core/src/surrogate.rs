//! Perturbation surrogates `S(θ, α)` with the density and values frozen at θ,
//! their sampled and clipped forms, chain iteration, Fisher matrices and
//! natural gradients.
//!
//! Every surrogate satisfies `∇αS(θ, 0) = ∇J(θ)`; second derivatives only
//! approximate `∇²J` because the frozen quantities ignore their own θ
//! dependence.

use log::warn;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, DsoError, Result};
use crate::exact::density_and_values;
use crate::model::{Chain, DsoProblem, GaussianChain, Setting, StateSpace, TabularProblem};
use crate::rollout::{Baseline, RolloutBatch, Termination};

/// Log importance ratios are clamped to `±MAX_LOG_RATIO`.
pub const MAX_LOG_RATIO: f64 = 30.0;

/// A smooth objective in the perturbation α.
pub trait SurrogateObjective: Send + Sync {
    fn n_params(&self) -> usize;
    fn value(&self, alpha: &[f64]) -> Result<f64>;
    fn gradient(&self, alpha: &[f64]) -> Result<DVector<f64>>;
    fn hessian(&self, alpha: &[f64]) -> Result<DMatrix<f64>>;
}

fn shifted(theta: &[f64], alpha: &[f64]) -> Result<Vec<f64>> {
    if alpha.len() != theta.len() {
        return Err(DsoError::Dimension(format!("α has {} entries, θ has {}", alpha.len(), theta.len())));
    }
    Ok(theta.iter().zip(alpha).map(|(t, a)| t + a).collect())
}

fn missing_second_derivatives() -> DsoError {
    DsoError::Capability("second derivatives are not available".into())
}

/// `S(θ,α) = Σ_x w(x)[L(x,θ+α) + γ Σ_{x'} P(x'|x,θ+α) V(x',θ)]` with the
/// occupancy (or stationary density) `w` and values `V` frozen at θ.
pub struct ExactSurrogate {
    problem: TabularProblem,
    theta: Vec<f64>,
    pub density: DVector<f64>,
    pub values: DVector<f64>,
    gamma: f64,
    skip_terminals: bool,
}

pub fn surrogate_exact(problem: &TabularProblem, theta: &[f64]) -> Result<ExactSurrogate> {
    if let Setting::TimeVarying { .. } = problem.setting {
        return Err(DsoError::Capability("the frozen-density surrogate needs a stationary setting".into()));
    }
    let (density, values) = density_and_values(problem, theta)?;
    Ok(ExactSurrogate {
        problem: problem.clone(),
        theta: theta.to_vec(),
        density,
        values,
        gamma: problem.gamma(),
        skip_terminals: problem.setting == Setting::FirstExit,
    })
}

impl ExactSurrogate {
    fn states(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.problem.n_states())
            .filter(|&x| self.density[x] != 0.0 && !(self.skip_terminals && self.problem.chain.is_terminal_state(x)))
    }

    /// `Σ_x w(x) V(x)`, which equals `S(θ, 0)` in the episodic settings.
    pub fn frozen_contraction(&self) -> f64 {
        self.density.dot(&self.values)
    }
}

impl SurrogateObjective for ExactSurrogate {
    fn n_params(&self) -> usize {
        self.theta.len()
    }

    fn value(&self, alpha: &[f64]) -> Result<f64> {
        let th = shifted(&self.theta, alpha)?;
        Ok(self
            .states()
            .map(|x| {
                let row = self.problem.chain.row(x, &th, 0);
                let next: f64 = row.successors.iter().zip(&row.probs).map(|(s, p)| p * self.values[*s]).sum();
                self.density[x] * (self.problem.cost.value(&x, &th, 0) + self.gamma * next)
            })
            .sum())
    }

    fn gradient(&self, alpha: &[f64]) -> Result<DVector<f64>> {
        let th = shifted(&self.theta, alpha)?;
        let mut g = DVector::zeros(self.theta.len());
        for x in self.states() {
            let row = self.problem.chain.row(x, &th, 0);
            let dp = self.problem.chain.row_prob_grad(x, &th, 0);
            let v = DVector::from_iterator(row.successors.len(), row.successors.iter().map(|&s| self.values[s]));
            let term = self.problem.cost.grad(&x, &th, 0) + dp.transpose() * v * self.gamma;
            g.axpy(self.density[x], &term, 1.0);
        }
        Ok(g)
    }

    /// Uses `∇²P = P (s sᵀ + ∇² ln P)`.
    fn hessian(&self, alpha: &[f64]) -> Result<DMatrix<f64>> {
        let th = shifted(&self.theta, alpha)?;
        let n = self.theta.len();
        let mut h = DMatrix::zeros(n, n);
        for x in self.states() {
            let row = self.problem.chain.row(x, &th, 0);
            let score_hess = self
                .problem
                .chain
                .row_score_hessians(x, &th, 0)
                .ok_or_else(missing_second_derivatives)?;
            let mut term = self.problem.cost.hessian(&x, &th, 0).ok_or_else(missing_second_derivatives)?;
            for (k, &s) in row.successors.iter().enumerate() {
                let sc = row.scores.row(k).transpose();
                let w = self.gamma * row.probs[k] * self.values[s];
                term += (&sc * sc.transpose() + &score_hess[k]) * w;
            }
            h += term * self.density[x];
        }
        Ok((&h + h.transpose()) * 0.5)
    }
}

struct FrozenRollout<S> {
    states: Vec<S>,
    /// `ln P(x_{t+1}|x_t,θ)` at the snapshot.
    base_log_prob: Vec<f64>,
    /// `R_{t+1} - b(x_t)`.
    advantage: Vec<f64>,
}

/// `S̃(θ,α) = (1/N) Σ_n Σ_t γ^t (L(x_t,θ+α) + γ P̂_t R̂_{t+1})` with
/// `P̂_t = P(x_{t+1}|x_t,θ+α) / P(x_{t+1}|x_t,θ)`.
pub struct SampledSurrogate<S, C: ?Sized> {
    problem: DsoProblem<S, C>,
    theta: Vec<f64>,
    discount: f64,
    rollouts: Vec<FrozenRollout<S>>,
}

pub fn surrogate_sampled<S, C>(
    problem: &DsoProblem<S, C>,
    theta: &[f64],
    batch: &RolloutBatch<S>,
    baseline: Option<&dyn Baseline<S>>,
) -> Result<SampledSurrogate<S, C>>
where
    S: StateSpace,
    C: Chain<S> + ?Sized,
{
    if batch.theta.as_slice() != theta {
        return Err(DsoError::Staleness);
    }
    if batch.rollouts.is_empty() {
        return invalid("batch has no usable rollouts");
    }
    if problem.setting == Setting::Average {
        return Err(DsoError::Capability("sampled surrogates need an episodic or finite-horizon setting".into()));
    }
    let rollouts = batch
        .rollouts
        .iter()
        .map(|r| {
            let k = r.len();
            let base_log_prob = (0..k - 1)
                .map(|t| problem.chain.log_prob(&r.states[t], &r.states[t + 1], theta, t))
                .collect();
            let advantage = (0..k - 1)
                .map(|t| r.returns[t + 1] - baseline.map_or(0.0, |b| b.value(&r.states[t], theta, t)))
                .collect();
            FrozenRollout { states: r.states.clone(), base_log_prob, advantage }
        })
        .collect();
    Ok(SampledSurrogate { problem: problem.clone(), theta: theta.to_vec(), discount: batch.discount, rollouts })
}

/// One transition term `γ^{t+1} P̂ R̂` as seen by the clipped and unclipped objectives.
struct RatioTerm {
    weight: f64,
    ratio: f64,
    advantage: f64,
    t: usize,
}

impl<S, C> SampledSurrogate<S, C>
where
    S: StateSpace,
    C: Chain<S> + ?Sized,
{
    /// Visits every cost term `(t, γ^t, x_t)` and every ratio term.
    fn walk(
        &self,
        th: &[f64],
        mut on_cost: impl FnMut(usize, f64, &S),
        mut on_ratio: impl FnMut(&RatioTerm, &S, &S),
    ) {
        let mut clipped = 0usize;
        for r in &self.rollouts {
            let mut w = 1.0;
            for (t, x) in r.states.iter().enumerate() {
                on_cost(t, w, x);
                if t + 1 < r.states.len() {
                    let next = &r.states[t + 1];
                    let log_ratio = self.problem.chain.log_prob(x, next, th, t) - r.base_log_prob[t];
                    let clamped = log_ratio.clamp(-MAX_LOG_RATIO, MAX_LOG_RATIO);
                    if clamped != log_ratio {
                        clipped += 1;
                    }
                    let term = RatioTerm { weight: w * self.discount, ratio: clamped.exp(), advantage: r.advantage[t], t };
                    on_ratio(&term, x, next);
                }
                w *= self.discount;
            }
        }
        if clipped > 0 {
            warn!("{clipped} importance ratios exceeded exp(±{MAX_LOG_RATIO}) and were clamped");
        }
    }

    fn n_rollouts(&self) -> f64 {
        self.rollouts.len() as f64
    }

    /// `P̂` for every transition in the batch, rollout-major.
    pub fn ratios(&self, alpha: &[f64]) -> Result<Vec<f64>> {
        let th = shifted(&self.theta, alpha)?;
        let mut out = Vec::new();
        self.walk(&th, |_, _, _| {}, |term, _, _| out.push(term.ratio));
        Ok(out)
    }

    fn clipped_value(&self, alpha: &[f64], clip: Option<f64>) -> Result<f64> {
        let th = shifted(&self.theta, alpha)?;
        let mut total = 0.0;
        let mut ratio_total = 0.0;
        self.walk(
            &th,
            |t, w, x| total += w * self.problem.cost.value(x, &th, t),
            |term, _, _| ratio_total += term.weight * clipped_term(term.ratio, term.advantage, clip).0,
        );
        Ok((total + ratio_total) / self.n_rollouts())
    }

    fn clipped_gradient(&self, alpha: &[f64], clip: Option<f64>) -> Result<DVector<f64>> {
        let th = shifted(&self.theta, alpha)?;
        let mut g = DVector::zeros(self.theta.len());
        let mut ratio_part = DVector::zeros(self.theta.len());
        self.walk(
            &th,
            |t, w, x| g.axpy(w, &self.problem.cost.grad(x, &th, t), 1.0),
            |term, x, next| {
                if clipped_term(term.ratio, term.advantage, clip).1 {
                    let s = self.problem.chain.score(x, next, &th, term.t);
                    ratio_part.axpy(term.weight * term.ratio * term.advantage, &s, 1.0);
                }
            },
        );
        Ok((g + ratio_part) / self.n_rollouts())
    }

    fn clipped_hessian(&self, alpha: &[f64], clip: Option<f64>) -> Result<DMatrix<f64>> {
        let th = shifted(&self.theta, alpha)?;
        let n = self.theta.len();
        let mut h_cost = DMatrix::zeros(n, n);
        let mut h_ratio = DMatrix::zeros(n, n);
        let mut cost_missing = false;
        let mut chain_missing = false;
        self.walk(
            &th,
            |t, w, x| match self.problem.cost.hessian(x, &th, t) {
                Some(m) => h_cost += m * w,
                None => cost_missing = true,
            },
            |term, x, next| {
                if !clipped_term(term.ratio, term.advantage, clip).1 {
                    return;
                }
                let s = self.problem.chain.score(x, next, &th, term.t);
                match self.problem.chain.score_hessian(x, next, &th, term.t) {
                    Some(m) => h_ratio += (&s * s.transpose() + m) * (term.weight * term.ratio * term.advantage),
                    None => chain_missing = true,
                }
            },
        );
        if cost_missing || chain_missing {
            return Err(missing_second_derivatives());
        }
        let h = h_cost + h_ratio;
        let h = h / self.n_rollouts();
        Ok((&h + h.transpose()) * 0.5)
    }
}

/// `max(P̂ R̂, clip(P̂, 1-ε, 1+ε) R̂)` and whether the unclipped branch is the
/// active one (ties go to the unclipped branch, so the gradient at α = 0 is
/// always the unclipped one).
fn clipped_term(ratio: f64, advantage: f64, clip: Option<f64>) -> (f64, bool) {
    let raw = ratio * advantage;
    match clip {
        None => (raw, true),
        Some(eps) => {
            let bounded = ratio.clamp(1.0 - eps, 1.0 + eps) * advantage;
            if raw >= bounded {
                (raw, true)
            } else {
                (bounded, false)
            }
        }
    }
}

impl<S, C> SurrogateObjective for SampledSurrogate<S, C>
where
    S: StateSpace,
    C: Chain<S> + ?Sized,
{
    fn n_params(&self) -> usize {
        self.theta.len()
    }

    fn value(&self, alpha: &[f64]) -> Result<f64> {
        self.clipped_value(alpha, None)
    }

    fn gradient(&self, alpha: &[f64]) -> Result<DVector<f64>> {
        self.clipped_gradient(alpha, None)
    }

    fn hessian(&self, alpha: &[f64]) -> Result<DMatrix<f64>> {
        self.clipped_hessian(alpha, None)
    }
}

/// The sampled surrogate with each ratio term replaced by the pessimistic
/// `max(P̂ R̂, clip(P̂, 1-ε, 1+ε) R̂)`. The gradient is the subgradient that
/// drops terms whose clipped branch is active.
pub struct PcoObjective<S, C: ?Sized> {
    pub inner: SampledSurrogate<S, C>,
    pub epsilon: f64,
}

/// Any `ε > 0` is accepted here; very large ε reproduces the unclipped surrogate.
pub fn pco_objective<S, C>(inner: SampledSurrogate<S, C>, epsilon: f64) -> Result<PcoObjective<S, C>>
where
    S: StateSpace,
    C: Chain<S> + ?Sized,
{
    if !(epsilon > 0.0) {
        return Err(DsoError::Config(format!("clip ε must be positive, got {epsilon}")));
    }
    Ok(PcoObjective { inner, epsilon })
}

impl<S, C> SurrogateObjective for PcoObjective<S, C>
where
    S: StateSpace,
    C: Chain<S> + ?Sized,
{
    fn n_params(&self) -> usize {
        self.inner.theta.len()
    }

    fn value(&self, alpha: &[f64]) -> Result<f64> {
        self.inner.clipped_value(alpha, Some(self.epsilon))
    }

    fn gradient(&self, alpha: &[f64]) -> Result<DVector<f64>> {
        self.inner.clipped_gradient(alpha, Some(self.epsilon))
    }

    fn hessian(&self, alpha: &[f64]) -> Result<DMatrix<f64>> {
        self.inner.clipped_hessian(alpha, Some(self.epsilon))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum InnerOptimizer {
    /// Gradient descent with Armijo backtracking from `initial_step`.
    GradientDescent { initial_step: f64 },
    /// Newton steps on the surrogate Hessian plus `damping · I`.
    DampedNewton { damping: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChainIterationConfig {
    pub inner: InnerOptimizer,
    /// Stop once `‖∇αS‖∞ < tol`.
    pub tol: f64,
    pub max_inner: usize,
    /// Fraction of α* applied to θ.
    pub kappa: f64,
}

impl Default for ChainIterationConfig {
    fn default() -> Self {
        Self {
            inner: InnerOptimizer::GradientDescent { initial_step: 1.0 },
            tol: 1e-8,
            max_inner: 100,
            kappa: 1.0,
        }
    }
}

/// Inner divergence: this many consecutive increases of S reject the step.
pub const MAX_CONSECUTIVE_INCREASES: usize = 5;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ChainIterationReport {
    pub theta: Vec<f64>,
    pub alpha: DVector<f64>,
    pub inner_iterations: usize,
    pub surrogate_start: f64,
    pub surrogate_end: f64,
    pub accepted: bool,
    /// κ to use next: unchanged on acceptance, halved on rejection.
    pub kappa: f64,
}

/// Minimizes `S(θ, ·)` from α = 0 and returns `θ + κ α*`.
pub fn chain_iteration_step(
    surrogate: &dyn SurrogateObjective,
    theta: &[f64],
    config: &ChainIterationConfig,
) -> Result<ChainIterationReport> {
    if !(0.0..=1.0).contains(&config.kappa) {
        return Err(DsoError::Config(format!("κ must lie in [0, 1], got {}", config.kappa)));
    }
    let n = surrogate.n_params();
    if n != theta.len() {
        return Err(DsoError::Dimension("surrogate and θ sizes differ".into()));
    }
    let mut alpha = DVector::zeros(n);
    let start = surrogate.value(alpha.as_slice())?;
    let mut current = start;
    let mut increases = 0;
    let mut iterations = 0;
    let mut step = match config.inner {
        InnerOptimizer::GradientDescent { initial_step } => initial_step,
        InnerOptimizer::DampedNewton { .. } => 1.0,
    };
    let mut accepted = true;
    while iterations < config.max_inner {
        let g = surrogate.gradient(alpha.as_slice())?;
        if g.amax() < config.tol {
            break;
        }
        iterations += 1;
        match config.inner {
            InnerOptimizer::GradientDescent { .. } => {
                let slope = g.norm_squared();
                let mut found = None;
                for _ in 0..60 {
                    let trial = &alpha - &g * step;
                    let v = surrogate.value(trial.as_slice())?;
                    if v.is_finite() && v <= current - 1e-4 * step * slope {
                        found = Some((trial, v));
                        break;
                    }
                    step *= 0.5;
                }
                match found {
                    Some((trial, v)) => {
                        alpha = trial;
                        current = v;
                        step *= 2.0;
                    }
                    None => break,
                }
            }
            InnerOptimizer::DampedNewton { damping } => {
                let h = surrogate.hessian(alpha.as_slice())?;
                let dir = spd_solve(&h, &g, damping.max(0.0))?.0;
                alpha -= dir;
                let v = surrogate.value(alpha.as_slice())?;
                if !v.is_finite() || v > current {
                    increases += 1;
                } else {
                    increases = 0;
                }
                current = v;
                if increases >= MAX_CONSECUTIVE_INCREASES {
                    accepted = false;
                    break;
                }
            }
        }
    }
    if !accepted {
        warn!("surrogate increased {MAX_CONSECUTIVE_INCREASES} times in a row; step rejected");
        return Ok(ChainIterationReport {
            theta: theta.to_vec(),
            alpha,
            inner_iterations: iterations,
            surrogate_start: start,
            surrogate_end: current,
            accepted,
            kappa: config.kappa * 0.5,
        });
    }
    let new_theta = theta.iter().zip(alpha.iter()).map(|(t, a)| t + config.kappa * a).collect();
    Ok(ChainIterationReport {
        theta: new_theta,
        alpha,
        inner_iterations: iterations,
        surrogate_start: start,
        surrogate_end: current,
        accepted,
        kappa: config.kappa,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FisherSource {
    Exact,
    Sampled,
}

/// Symmetric PSD metric on parameter space.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FisherMatrix {
    pub matrix: DMatrix<f64>,
    /// Entrywise standard errors of a sampled estimate.
    pub stderr: Option<DMatrix<f64>>,
    pub source: FisherSource,
    pub n: usize,
}

impl FisherMatrix {
    pub fn min_eigenvalue(&self) -> f64 {
        self.matrix.clone().symmetric_eigen().eigenvalues.min()
    }
}

/// `Σ_x ρ̂(x) Σ_{x'} P s sᵀ` with `ρ̂ = ρ / Σρ` (stationary density in the
/// average setting).
pub fn fisher_exact(problem: &TabularProblem, theta: &[f64]) -> Result<FisherMatrix> {
    let (density, _) = density_and_values(problem, theta)?;
    let total = density.sum();
    let n = problem.n_params();
    let mut f = DMatrix::zeros(n, n);
    for x in 0..problem.n_states() {
        if density[x] == 0.0 {
            continue;
        }
        let row = problem.chain.row(x, theta, 0);
        for (k, p) in row.probs.iter().enumerate() {
            let s = row.scores.row(k).transpose();
            f += &s * s.transpose() * (density[x] / total * p);
        }
    }
    Ok(FisherMatrix { matrix: (&f + f.transpose()) * 0.5, stderr: None, source: FisherSource::Exact, n: 0 })
}

/// Ratio estimate `Σ w_t s_t s_tᵀ / Σ_{states} γ^t` of the normalized Fisher
/// matrix. Geometric stopping observes a transition after a visited state
/// only with probability γ, so its transition terms carry weight `1/γ`.
pub fn fisher_sampled<S, C>(problem: &DsoProblem<S, C>, theta: &[f64], batch: &RolloutBatch<S>) -> Result<FisherMatrix>
where
    S: StateSpace,
    C: Chain<S> + ?Sized,
{
    if batch.theta.as_slice() != theta {
        return Err(DsoError::Staleness);
    }
    if batch.rollouts.is_empty() {
        return invalid("batch has no usable rollouts");
    }
    let transition_scale = match batch.termination {
        Termination::Geometric { gamma, .. } if gamma > 0.0 => 1.0 / gamma,
        Termination::Geometric { .. } => 0.0,
        _ => 1.0,
    };
    let n = problem.n_params();
    let mut numerators = Vec::with_capacity(batch.rollouts.len());
    let mut masses = Vec::with_capacity(batch.rollouts.len());
    for r in &batch.rollouts {
        let mut a = DMatrix::zeros(n, n);
        let mut mass = 0.0;
        let mut w = 1.0;
        for t in 0..r.len() {
            mass += w;
            if t + 1 < r.len() {
                let s = &r.scores[t];
                a.syger(w * transition_scale, s, s, 1.0);
            }
            w *= batch.discount;
        }
        a.fill_upper_triangle_with_lower_triangle();
        numerators.push(a);
        masses.push(mass);
    }
    let count = numerators.len() as f64;
    let total_mass: f64 = masses.iter().sum();
    let f = numerators.iter().fold(DMatrix::zeros(n, n), |acc, a| acc + a) / total_mass;
    // delta-method standard error of a ratio of means
    let mut var = DMatrix::zeros(n, n);
    for (a, m) in numerators.iter().zip(&masses) {
        let resid = a - &f * *m;
        var += resid.component_mul(&resid);
    }
    let mean_mass = total_mass / count;
    let stderr = if count > 1.0 {
        (var / (count * (count - 1.0))).map(f64::sqrt) / mean_mass
    } else {
        DMatrix::zeros(n, n)
    };
    Ok(FisherMatrix { matrix: f, stderr: Some(stderr), source: FisherSource::Sampled, n: numerators.len() })
}

/// Closed-form Fisher of a linear-Gaussian chain under the normalized
/// discounted state distribution: `(BᵀΣ⁻¹B) ⊗ M̃`.
pub fn fisher_gaussian(problem: &DsoProblem<DVector<f64>, GaussianChain>, theta: &[f64]) -> Result<FisherMatrix> {
    let gamma = match problem.setting {
        Setting::EpisodicDiscounted { gamma } => gamma,
        _ => return Err(DsoError::Capability("closed-form Gaussian Fisher needs a discounted setting".into())),
    };
    let moment = problem.chain.discounted_augmented_moment(theta, &problem.p0, gamma)?;
    Ok(FisherMatrix {
        matrix: problem.chain.fisher_from_moment(&moment),
        stderr: None,
        source: FisherSource::Exact,
        n: 0,
    })
}

/// Damping escalations tried after the first failed solve.
pub const MAX_DAMPING_ESCALATIONS: usize = 3;

/// Solves `(A + λI) x = b` by Cholesky, multiplying λ by 10 on failure (a
/// zero λ starts from `1e-10 · max(1, mean diagonal)`). Returns the solution
/// and the damping that succeeded.
pub fn spd_solve(a: &DMatrix<f64>, b: &DVector<f64>, damping: f64) -> Result<(DVector<f64>, f64)> {
    let n = a.nrows();
    if a.ncols() != n || b.len() != n {
        return Err(DsoError::Dimension("matrix and right-hand side sizes differ".into()));
    }
    let mut lambda = damping;
    for attempt in 0..=MAX_DAMPING_ESCALATIONS {
        let m = a + DMatrix::identity(n, n) * lambda;
        if let Some(ch) = m.cholesky() {
            let x = ch.solve(b);
            if x.iter().all(|v| v.is_finite()) {
                return Ok((x, lambda));
            }
        }
        if attempt < MAX_DAMPING_ESCALATIONS {
            lambda = if lambda > 0.0 {
                lambda * 10.0
            } else {
                1e-10 * (a.trace() / n.max(1) as f64).abs().max(1.0)
            };
        }
    }
    Err(DsoError::Solve(format!("metric is not positive definite even with damping {lambda}")))
}

/// `(F + λI)⁻¹ ∇J`.
pub fn natural_gradient(grad: &DVector<f64>, fisher: &FisherMatrix, damping: f64) -> Result<DVector<f64>> {
    Ok(spd_solve(&fisher.matrix, grad, damping)?.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::exact::{exact_gradient, objective};
    use crate::model::{make_softmax_chain, InitialDistribution, TableCost};
    use crate::rollout::{algorithm1_gradient, generate_rollouts};
    use std::sync::Arc;

    fn canonical() -> TabularProblem {
        let chain = Arc::new(make_softmax_chain(2, &[vec![0, 1], vec![1]], &[1]).unwrap());
        let cost = Arc::new(TableCost::new(vec![1.0, 0.0], 2));
        TabularProblem::new(chain, cost, Setting::FirstExit, InitialDistribution::point(2, 0)).unwrap()
    }

    #[test]
    fn exact_surrogate_contracts_at_zero() {
        let pr = canonical();
        let s = surrogate_exact(&pr, &[0.3, -0.2]).unwrap();
        assert!((s.value(&[0.0, 0.0]).unwrap() - s.frozen_contraction()).abs() < 1e-12);
        let g = s.gradient(&[0.0, 0.0]).unwrap();
        assert!((g - exact_gradient(&pr, &[0.3, -0.2]).unwrap()).amax() < 1e-12);
    }

    #[test]
    fn sampled_surrogate_gradient_is_the_batch_estimate() {
        let pr = canonical();
        let theta = [0.1, 0.2];
        let batch = generate_rollouts(&pr, &theta, 500, Termination::Terminal { cap: 1000 }, 4, None).unwrap();
        let s = surrogate_sampled(&pr, &theta, &batch, None).unwrap();
        let est = algorithm1_gradient(&pr, &theta, &batch, None).unwrap();
        assert!((s.gradient(&[0.0, 0.0]).unwrap() - est.mean).amax() < 1e-12);
        assert!(s.ratios(&[0.0, 0.0]).unwrap().iter().all(|&r| r == 1.0));
    }

    #[test]
    fn exact_chain_iteration_decreases_cost() {
        let pr = canonical();
        let theta = [0.0, 0.0];
        let s = surrogate_exact(&pr, &theta).unwrap();
        let rep = chain_iteration_step(&s, &theta, &ChainIterationConfig::default()).unwrap();
        assert!(rep.accepted);
        assert!(objective(&pr, &rep.theta).unwrap() < objective(&pr, &theta).unwrap());
        let frozen = chain_iteration_step(&s, &theta, &ChainIterationConfig { kappa: 0.0, ..Default::default() }).unwrap();
        assert_eq!(frozen.theta, theta.to_vec());
    }

    #[test]
    fn identity_metric_leaves_gradient_unchanged() {
        let f = FisherMatrix { matrix: DMatrix::identity(3, 3), stderr: None, source: FisherSource::Exact, n: 0 };
        let g = DVector::from_vec(vec![1.5, -2.0, 0.25]);
        assert!((natural_gradient(&g, &f, 0.0).unwrap() - &g).amax() < 1e-14);
        let f2 = FisherMatrix { matrix: DMatrix::identity(3, 3) * 2.0, ..f };
        assert!((natural_gradient(&g, &f2, 0.0).unwrap() - &g / 2.0).amax() < 1e-14);
    }

    #[test]
    fn singular_metric_is_damped() {
        let (x, lambda) = spd_solve(&DMatrix::zeros(2, 2), &DVector::from_vec(vec![1.0, 1.0]), 0.0).unwrap();
        assert!(lambda > 0.0);
        assert!(x.iter().all(|v| v.is_finite() && *v > 0.0));
        assert!(spd_solve(&DMatrix::from_diagonal_element(2, 2, -1.0), &DVector::zeros(2), 0.0).is_err());
    }

    #[test]
    fn clip_composition_is_pessimistic() {
        for &(r, a) in &[(1.5, 1.0), (1.5, -1.0), (0.5, 1.0), (0.5, -1.0), (1.0, 3.0)] {
            let (v, _) = clipped_term(r, a, Some(0.2));
            assert!(v >= r * a);
        }
        assert!(!clipped_term(0.5, 1.0, Some(0.2)).1);
    }
}
