//! Problem abstraction shared by every solver: parameter vectors, chain and
//! cost interfaces, settings and initial distributions.
//!
//! A problem couples a parameterized Markov chain `P(x'|x,θ)` with a step cost
//! `L(x,θ)` that reads the *same* flat parameter vector. Tabular chains expose
//! whole transition rows (successors, probabilities, scores), which is what the
//! exact linear-algebra solvers consume; every chain can be sampled and scored,
//! which is what the rollout estimators consume.

mod bottleneck;
mod cost;
mod gaussian;
mod loglinear;

pub use bottleneck::{
    Bottleneck, BottleneckChain, BottleneckCost, IdentityBottleneck, MixtureBottleneck,
    ScalarMixtureBottleneck,
};
pub use cost::{
    cost_kl_to_fixed, cost_policy_entropy, cost_sum, CostSum, KlToFixedCost, PolicyEntropyCost,
    QuadraticCost, QuadraticTerm, TableCost, TabularPolicy,
};
pub use gaussian::{make_gaussian_chain, GaussianChain, GaussianControlCost, LinearPolicy};
pub use loglinear::{make_softmax_chain, FixedChain, LogLinearChain, LogLinearRow};

use std::fmt::Debug;
use std::ops::Deref;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, RngCore};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, DsoError, Result};

/// Tolerance used when checking that probability vectors sum to one.
pub const NORMALIZATION_TOL: f64 = 1e-12;

/// Flat parameter vector θ. Entries are finite and the length is fixed once built.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct ParamVector(Vec<f64>);

impl ParamVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return invalid(format!("parameter {i} is not finite"));
        }
        Ok(Self(values))
    }

    pub fn zeros(n: usize) -> Self {
        Self(vec![0.0; n])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn to_dvector(&self) -> DVector<f64> {
        DVector::from_column_slice(&self.0)
    }

    /// Adds `scale * step` in place; the length must match.
    pub fn axpy(&mut self, scale: f64, step: &DVector<f64>) -> Result<()> {
        if step.len() != self.0.len() {
            return Err(DsoError::Dimension(format!(
                "step has length {}, parameters have length {}",
                step.len(),
                self.0.len()
            )));
        }
        let updated: Vec<f64> = self.0.iter().zip(step.iter()).map(|(t, s)| t + scale * s).collect();
        if updated.iter().any(|v| !v.is_finite()) {
            return invalid("update produced non-finite parameters");
        }
        self.0 = updated;
        Ok(())
    }
}

impl Deref for ParamVector {
    type Target = [f64];
    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl TryFrom<Vec<f64>> for ParamVector {
    type Error = DsoError;
    fn try_from(v: Vec<f64>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<ParamVector> for Vec<f64> {
    fn from(p: ParamVector) -> Self {
        p.0
    }
}

/// How costs are accumulated along the chain.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum Setting {
    /// Infinite-horizon discounted episodes, `0 ≤ γ < 1` (γ = 0 keeps only the first step).
    EpisodicDiscounted { gamma: f64 },
    /// Undiscounted episodes that end on the chain's absorbing, zero-cost terminals.
    FirstExit,
    /// Average cost per step of an ergodic chain.
    Average,
    /// Finite horizon with time-indexed chain and cost, `x_0 .. x_T`.
    TimeVarying { horizon: usize },
}

impl Setting {
    pub fn validate(&self) -> Result<()> {
        match *self {
            Setting::EpisodicDiscounted { gamma } if !(0.0..1.0).contains(&gamma) => {
                invalid(format!("discount {gamma} outside [0, 1)"))
            }
            _ => Ok(()),
        }
    }

    /// Discount applied to the next-state value; 1 outside the discounted setting.
    pub fn gamma(&self) -> f64 {
        match *self {
            Setting::EpisodicDiscounted { gamma } => gamma,
            _ => 1.0,
        }
    }

    pub fn is_episodic(&self) -> bool {
        matches!(self, Setting::EpisodicDiscounted { .. } | Setting::FirstExit)
    }
}

/// Initial-state distribution `P_0`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InitialDistribution {
    Tabular(Vec<f64>),
    Gaussian { mean: DVector<f64>, cov: DMatrix<f64> },
}

impl InitialDistribution {
    pub fn tabular(weights: Vec<f64>) -> Result<Self> {
        if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return invalid("initial weights must be finite and nonnegative");
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > NORMALIZATION_TOL {
            return invalid(format!("initial weights sum to {total}"));
        }
        Ok(Self::Tabular(weights))
    }

    /// Point mass on one tabular state.
    pub fn point(n_states: usize, state: usize) -> Self {
        let mut w = vec![0.0; n_states];
        w[state] = 1.0;
        Self::Tabular(w)
    }

    pub fn uniform(n_states: usize) -> Self {
        Self::Tabular(vec![1.0 / n_states as f64; n_states])
    }

    pub fn gaussian(mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self> {
        if cov.nrows() != mean.len() || cov.ncols() != mean.len() {
            return invalid("covariance shape does not match the mean");
        }
        if (&cov - cov.transpose()).amax() > 1e-12 {
            return invalid("covariance is not symmetric");
        }
        let eig = cov.clone().symmetric_eigen();
        if eig.eigenvalues.iter().any(|&l| l < -1e-12) {
            return invalid("covariance is not positive semidefinite");
        }
        Ok(Self::Gaussian { mean, cov })
    }

    pub fn weights(&self) -> Option<&[f64]> {
        match self {
            Self::Tabular(w) => Some(w),
            Self::Gaussian { .. } => None,
        }
    }
}

/// State types that rollouts can carry.
pub trait StateSpace: Clone + Debug + Send + Sync + Serialize + DeserializeOwned + 'static {
    fn sample_initial(p0: &InitialDistribution, rng: &mut dyn RngCore) -> Result<Self>;
    fn is_finite(&self) -> bool;
}

impl StateSpace for usize {
    fn sample_initial(p0: &InitialDistribution, rng: &mut dyn RngCore) -> Result<Self> {
        match p0 {
            InitialDistribution::Tabular(w) => Ok(sample_categorical(w, rng)),
            InitialDistribution::Gaussian { .. } => {
                invalid("Gaussian initial distribution on a tabular chain")
            }
        }
    }

    fn is_finite(&self) -> bool {
        true
    }
}

impl StateSpace for DVector<f64> {
    fn sample_initial(p0: &InitialDistribution, rng: &mut dyn RngCore) -> Result<Self> {
        match p0 {
            InitialDistribution::Gaussian { mean, cov } => {
                let factor = psd_factor(cov);
                Ok(mean + factor * standard_normal(mean.len(), rng))
            }
            InitialDistribution::Tabular(_) => {
                invalid("tabular initial distribution on a continuous chain")
            }
        }
    }

    fn is_finite(&self) -> bool {
        self.iter().all(|v| v.is_finite())
    }
}

/// Draws an index with probability proportional to `weights` (assumed normalized).
pub fn sample_categorical(weights: &[f64], rng: &mut dyn RngCore) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, w) in weights.iter().enumerate() {
        acc += w;
        if u < acc {
            return i;
        }
    }
    // u landed in the rounding gap above the cumulative sum
    weights.iter().rposition(|&w| w > 0.0).unwrap_or(weights.len() - 1)
}

pub(crate) fn standard_normal(n: usize, rng: &mut dyn RngCore) -> DVector<f64> {
    use rand_distr::{Distribution, StandardNormal};
    DVector::from_fn(n, |_, _| StandardNormal.sample(rng))
}

/// Square-root factor `F` with `F Fᵀ = cov` for a PSD matrix.
pub(crate) fn psd_factor(cov: &DMatrix<f64>) -> DMatrix<f64> {
    if let Some(chol) = cov.clone().cholesky() {
        return chol.l();
    }
    let eig = cov.clone().symmetric_eigen();
    let sqrt = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&sqrt)
}

/// A parameterized Markov chain `P(x'|x,θ)`, possibly time-indexed.
///
/// Implementations are pure in `(x, θ, t)`; sampling draws from the caller's RNG.
pub trait Chain<S>: Send + Sync {
    fn n_params(&self) -> usize;

    fn sample(&self, x: &S, theta: &[f64], t: usize, rng: &mut dyn RngCore) -> S;

    fn log_prob(&self, x: &S, next: &S, theta: &[f64], t: usize) -> f64;

    /// `∇θ ln P(next|x,θ)`.
    fn score(&self, x: &S, next: &S, theta: &[f64], t: usize) -> DVector<f64>;

    /// `∇²θ ln P(next|x,θ)`, when the model is twice differentiable.
    fn score_hessian(&self, _x: &S, _next: &S, _theta: &[f64], _t: usize) -> Option<DMatrix<f64>> {
        None
    }

    fn is_terminal(&self, _x: &S) -> bool {
        false
    }
}

/// One row of a tabular chain: the allowed successors of a state, their
/// probabilities and their scores (one score per row of `scores`).
#[derive(Debug, Clone)]
pub struct TabularRow {
    pub successors: Vec<usize>,
    pub probs: Vec<f64>,
    /// `successors.len() × n_θ`; row `k` is `∇θ ln P(successors[k]|x,θ)`.
    pub scores: DMatrix<f64>,
}

impl TabularRow {
    pub fn position(&self, next: usize) -> Option<usize> {
        self.successors.iter().position(|&s| s == next)
    }

    /// `∇θP` assembled from the score identity `∇P = P ∇ln P`.
    pub fn prob_grad_from_scores(&self) -> DMatrix<f64> {
        let mut g = self.scores.clone();
        for (k, p) in self.probs.iter().enumerate() {
            g.row_mut(k).scale_mut(*p);
        }
        g
    }
}

/// A chain over states `0..n_states` that exposes full transition rows.
pub trait TabularChain: Send + Sync {
    fn n_states(&self) -> usize;

    fn n_params(&self) -> usize;

    /// Absorbing states (self-loop with probability one and zero score).
    fn terminals(&self) -> &[usize];

    fn row(&self, x: usize, theta: &[f64], t: usize) -> TabularRow;

    /// `∇θP(successor_k|x,θ)` as a `successors × n_θ` matrix.
    fn row_prob_grad(&self, x: usize, theta: &[f64], t: usize) -> DMatrix<f64> {
        self.row(x, theta, t).prob_grad_from_scores()
    }

    /// `∇²θ ln P(successor_k|x,θ)` per successor, when available.
    fn row_score_hessians(&self, _x: usize, _theta: &[f64], _t: usize) -> Option<Vec<DMatrix<f64>>> {
        None
    }

    /// Bottleneck structure `P = P̃(x'|x, μ(x,θ))`, when the chain has one.
    fn bottleneck(&self) -> Option<&dyn Bottleneck> {
        None
    }

    fn is_terminal_state(&self, x: usize) -> bool {
        self.terminals().contains(&x)
    }
}

impl<T: TabularChain + ?Sized> Chain<usize> for T {
    fn n_params(&self) -> usize {
        TabularChain::n_params(self)
    }

    fn sample(&self, x: &usize, theta: &[f64], t: usize, rng: &mut dyn RngCore) -> usize {
        let row = self.row(*x, theta, t);
        row.successors[sample_categorical(&row.probs, rng)]
    }

    fn log_prob(&self, x: &usize, next: &usize, theta: &[f64], t: usize) -> f64 {
        let row = self.row(*x, theta, t);
        row.position(*next).map_or(f64::NEG_INFINITY, |k| row.probs[k].ln())
    }

    fn score(&self, x: &usize, next: &usize, theta: &[f64], t: usize) -> DVector<f64> {
        let row = self.row(*x, theta, t);
        match row.position(*next) {
            Some(k) => row.scores.row(k).transpose(),
            None => DVector::zeros(TabularChain::n_params(self)),
        }
    }

    fn score_hessian(&self, x: &usize, next: &usize, theta: &[f64], t: usize) -> Option<DMatrix<f64>> {
        let row = self.row(*x, theta, t);
        let k = row.position(*next)?;
        self.row_score_hessians(*x, theta, t).map(|mut h| h.swap_remove(k))
    }

    fn is_terminal(&self, x: &usize) -> bool {
        self.is_terminal_state(*x)
    }
}

/// Parameter-dependent step cost `L(x,θ)`, possibly time-indexed.
pub trait Cost<S>: Send + Sync {
    fn n_params(&self) -> usize;

    fn value(&self, x: &S, theta: &[f64], t: usize) -> f64;

    fn grad(&self, x: &S, theta: &[f64], t: usize) -> DVector<f64>;

    fn hessian(&self, _x: &S, _theta: &[f64], _t: usize) -> Option<DMatrix<f64>> {
        None
    }
}

/// A chain, a cost sharing its parameters, a setting and an initial distribution.
pub struct DsoProblem<S, C: ?Sized> {
    pub chain: Arc<C>,
    pub cost: Arc<dyn Cost<S>>,
    pub setting: Setting,
    pub p0: InitialDistribution,
}

impl<S, C: ?Sized> Clone for DsoProblem<S, C> {
    fn clone(&self) -> Self {
        Self {
            chain: Arc::clone(&self.chain),
            cost: Arc::clone(&self.cost),
            setting: self.setting,
            p0: self.p0.clone(),
        }
    }
}

/// Problems over finite state spaces, consumed by the exact solvers.
pub type TabularProblem = DsoProblem<usize, dyn TabularChain>;

impl<S, C: Chain<S> + ?Sized> DsoProblem<S, C> {
    pub fn n_params(&self) -> usize {
        self.chain.n_params()
    }

    pub fn gamma(&self) -> f64 {
        self.setting.gamma()
    }
}

impl TabularProblem {
    /// Builds and validates a tabular problem.
    ///
    /// Checks shared parameter count, normalized `p0`, and for first-exit
    /// problems a nonempty set of absorbing terminals with zero cost at `θ = 0`.
    pub fn new(
        chain: Arc<dyn TabularChain>,
        cost: Arc<dyn Cost<usize>>,
        setting: Setting,
        p0: InitialDistribution,
    ) -> Result<Self> {
        setting.validate()?;
        if TabularChain::n_params(chain.as_ref()) != cost.n_params() {
            return invalid(format!(
                "chain has {} parameters, cost has {}",
                TabularChain::n_params(chain.as_ref()),
                cost.n_params()
            ));
        }
        let n = chain.n_states();
        let w = p0.weights().ok_or_else(|| {
            DsoError::InvalidStructure("tabular problem needs a tabular initial distribution".into())
        })?;
        if w.len() != n {
            return invalid(format!("p0 has {} entries for {} states", w.len(), n));
        }
        let total: f64 = w.iter().sum();
        if (total - 1.0).abs() > NORMALIZATION_TOL {
            return invalid(format!("p0 sums to {total}"));
        }
        if setting == Setting::FirstExit {
            if chain.terminals().is_empty() {
                return invalid("first-exit setting needs at least one terminal state");
            }
            let theta = vec![0.0; cost.n_params()];
            for &x in chain.terminals() {
                let row = chain.row(x, &theta, 0);
                if row.successors != [x] {
                    return invalid(format!("terminal state {x} is not absorbing"));
                }
                if cost.value(&x, &theta, 0) != 0.0 {
                    return invalid(format!("terminal state {x} has nonzero cost"));
                }
            }
        }
        Ok(Self { chain, cost, setting, p0 })
    }

    pub fn n_states(&self) -> usize {
        self.chain.n_states()
    }

    pub fn p0_weights(&self) -> &[f64] {
        self.p0.weights().expect("validated tabular p0")
    }

    /// Same chain and cost under a different setting or initial distribution.
    pub fn with_setting(&self, setting: Setting) -> Result<Self> {
        Self::new(Arc::clone(&self.chain), Arc::clone(&self.cost), setting, self.p0.clone())
    }
}

impl DsoProblem<DVector<f64>, GaussianChain> {
    pub fn gaussian(
        chain: Arc<GaussianChain>,
        cost: Arc<dyn Cost<DVector<f64>>>,
        setting: Setting,
        p0: InitialDistribution,
    ) -> Result<Self> {
        setting.validate()?;
        if chain.n_params() != cost.n_params() {
            return invalid("chain and cost parameter counts differ");
        }
        match &p0 {
            InitialDistribution::Gaussian { mean, .. } if mean.len() == chain.state_dim() => {}
            _ => return invalid("Gaussian chain needs a Gaussian p0 of matching dimension"),
        }
        Ok(Self { chain, cost, setting, p0 })
    }
}

/// Numerically stable softmax of `logits`.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}
