//! Tabular MDPs viewed as parameterized chains: policy averaging, entropy and
//! KL-regularized variants, linearly-solvable problems, the two action-free
//! equivalence constructions, and classical policy-gradient formulas used as
//! independent cross-checks.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::error::{invalid, DsoError, Result};
use crate::exact::average_value_of_matrix;
use crate::model::{
    cost_kl_to_fixed, cost_policy_entropy, cost_sum, softmax, Bottleneck, BottleneckChain,
    BottleneckCost, Cost, FixedChain, InitialDistribution, MixtureBottleneck, Setting,
    TabularChain, TabularPolicy, TabularProblem, TabularRow, NORMALIZATION_TOL,
};

/// Finite MDP with transitions `p[x][a][x']` and costs `r[x][a]`.
///
/// Terminal states are absorbing under every action and cost nothing.
#[derive(Debug, Clone, PartialEq)]
pub struct TabularMdp {
    p: Vec<Vec<Vec<f64>>>,
    r: Vec<Vec<f64>>,
    terminals: Vec<usize>,
}

impl TabularMdp {
    pub fn new(p: Vec<Vec<Vec<f64>>>, r: Vec<Vec<f64>>, terminals: Vec<usize>) -> Result<Self> {
        let n = p.len();
        if n == 0 || r.len() != n {
            return invalid("MDP needs matching, nonempty transition and cost tables");
        }
        let m = p[0].len();
        if m == 0 {
            return invalid("MDP needs at least one action");
        }
        for x in 0..n {
            if p[x].len() != m || r[x].len() != m {
                return invalid(format!("state {x} does not list {m} actions"));
            }
            for a in 0..m {
                let row = &p[x][a];
                if row.len() != n || row.iter().any(|q| !(q.is_finite() && *q >= 0.0)) {
                    return invalid(format!("p(·|{x},{a}) is mis-shaped or negative"));
                }
                let total: f64 = row.iter().sum();
                if (total - 1.0).abs() > NORMALIZATION_TOL {
                    return invalid(format!("p(·|{x},{a}) sums to {total}"));
                }
                if !r[x][a].is_finite() {
                    return invalid(format!("r({x},{a}) is not finite"));
                }
            }
        }
        for &x in &terminals {
            if x >= n {
                return invalid(format!("terminal state {x} out of range"));
            }
            for a in 0..m {
                if p[x][a][x] != 1.0 || r[x][a] != 0.0 {
                    return invalid(format!("terminal state {x} is not absorbing and cost-free"));
                }
            }
        }
        Ok(Self { p, r, terminals })
    }

    pub fn n_states(&self) -> usize {
        self.p.len()
    }

    pub fn n_actions(&self) -> usize {
        self.p[0].len()
    }

    pub fn transitions(&self) -> &[Vec<Vec<f64>>] {
        &self.p
    }

    pub fn costs(&self) -> &[Vec<f64>] {
        &self.r
    }

    pub fn terminals(&self) -> &[usize] {
        &self.terminals
    }
}

/// Row-softmax policy with logits `θ[offset + x·m + a]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SoftmaxPolicy {
    n_states: usize,
    n_actions: usize,
    n_params: usize,
    offset: usize,
}

impl SoftmaxPolicy {
    pub fn new(n_states: usize, n_actions: usize) -> Self {
        Self { n_states, n_actions, n_params: n_states * n_actions, offset: 0 }
    }

    /// Logits stored at `offset ..` inside a parameter vector of length `n_params`.
    pub fn embedded(n_states: usize, n_actions: usize, n_params: usize, offset: usize) -> Result<Self> {
        if offset + n_states * n_actions > n_params {
            return invalid("policy logits do not fit the parameter vector");
        }
        Ok(Self { n_states, n_actions, n_params, offset })
    }

    fn block(&self, x: usize) -> usize {
        self.offset + x * self.n_actions
    }
}

impl TabularPolicy for SoftmaxPolicy {
    fn n_states(&self) -> usize {
        self.n_states
    }

    fn n_actions(&self) -> usize {
        self.n_actions
    }

    fn n_params(&self) -> usize {
        self.n_params
    }

    fn probs(&self, x: usize, theta: &[f64]) -> Vec<f64> {
        let b = self.block(x);
        softmax(&theta[b..b + self.n_actions])
    }

    fn scores(&self, x: usize, theta: &[f64]) -> DMatrix<f64> {
        let pi = self.probs(x, theta);
        let b = self.block(x);
        let mut s = DMatrix::zeros(self.n_actions, self.n_params);
        for a in 0..self.n_actions {
            for (c, p) in pi.iter().enumerate() {
                s[(a, b + c)] = f64::from(u8::from(a == c)) - p;
            }
        }
        s
    }

    fn score_hessians(&self, x: usize, theta: &[f64]) -> Option<Vec<DMatrix<f64>>> {
        // ∇² ln π_a = -(diag π - ππᵀ) on the state's block, for every a
        let pi = self.probs(x, theta);
        let b = self.block(x);
        let mut h = DMatrix::zeros(self.n_params, self.n_params);
        for i in 0..self.n_actions {
            for j in 0..self.n_actions {
                h[(b + i, b + j)] = pi[i] * pi[j] - if i == j { pi[i] } else { 0.0 };
            }
        }
        Some(vec![h; self.n_actions])
    }
}

/// θ-independent policy given by a probability table (zeros allowed).
#[derive(Debug, Clone, PartialEq)]
pub struct TablePolicy {
    probs: Vec<Vec<f64>>,
    n_params: usize,
}

impl TablePolicy {
    pub fn new(probs: Vec<Vec<f64>>, n_params: usize) -> Result<Self> {
        if probs.is_empty() || probs.iter().any(|row| row.len() != probs[0].len()) {
            return invalid("policy table rows must share one action count");
        }
        for (x, row) in probs.iter().enumerate() {
            let total: f64 = row.iter().sum();
            if row.iter().any(|p| !(*p >= 0.0)) || (total - 1.0).abs() > NORMALIZATION_TOL {
                return invalid(format!("policy row {x} is not a distribution"));
            }
        }
        Ok(Self { probs, n_params })
    }
}

impl TabularPolicy for TablePolicy {
    fn n_states(&self) -> usize {
        self.probs.len()
    }

    fn n_actions(&self) -> usize {
        self.probs[0].len()
    }

    fn n_params(&self) -> usize {
        self.n_params
    }

    fn probs(&self, x: usize, _theta: &[f64]) -> Vec<f64> {
        self.probs[x].clone()
    }

    fn scores(&self, _x: usize, _theta: &[f64]) -> DMatrix<f64> {
        DMatrix::zeros(self.n_actions(), self.n_params)
    }

    fn score_hessians(&self, _x: usize, _theta: &[f64]) -> Option<Vec<DMatrix<f64>>> {
        Some(vec![DMatrix::zeros(self.n_params, self.n_params); self.n_actions()])
    }
}

/// Action cost `ℓ(x,a,θ)`.
pub trait ActionCost: Send + Sync {
    fn n_params(&self) -> usize;
    fn value(&self, x: usize, a: usize, theta: &[f64]) -> f64;
    fn grad(&self, x: usize, a: usize, theta: &[f64]) -> DVector<f64>;
    fn hessian(&self, _x: usize, _a: usize, _theta: &[f64]) -> Option<DMatrix<f64>> {
        None
    }
}

/// θ-independent action cost table.
#[derive(Debug, Clone, PartialEq)]
pub struct ActionCostTable {
    r: Vec<Vec<f64>>,
    n_params: usize,
}

impl ActionCostTable {
    pub fn new(r: Vec<Vec<f64>>, n_params: usize) -> Self {
        Self { r, n_params }
    }
}

impl ActionCost for ActionCostTable {
    fn n_params(&self) -> usize {
        self.n_params
    }

    fn value(&self, x: usize, a: usize, _theta: &[f64]) -> f64 {
        self.r[x][a]
    }

    fn grad(&self, _x: usize, _a: usize, _theta: &[f64]) -> DVector<f64> {
        DVector::zeros(self.n_params)
    }

    fn hessian(&self, _x: usize, _a: usize, _theta: &[f64]) -> Option<DMatrix<f64>> {
        Some(DMatrix::zeros(self.n_params, self.n_params))
    }
}

/// Policy-averaged transitions `P(x'|x,θ) = Σ_a π(a|x,θ) p(x'|x,a)`.
pub struct PolicyChain {
    mdp: Arc<TabularMdp>,
    policy: Arc<dyn TabularPolicy>,
    successors: Vec<Vec<usize>>,
}

impl PolicyChain {
    pub fn new(mdp: Arc<TabularMdp>, policy: Arc<dyn TabularPolicy>) -> Result<Self> {
        if policy.n_states() != mdp.n_states() || policy.n_actions() != mdp.n_actions() {
            return invalid("policy and MDP dimensions differ");
        }
        let n = mdp.n_states();
        let successors = (0..n)
            .map(|x| {
                if mdp.terminals.contains(&x) {
                    vec![x]
                } else {
                    (0..n).filter(|&y| mdp.p[x].iter().any(|row| row[y] > 0.0)).collect()
                }
            })
            .collect();
        Ok(Self { mdp, policy, successors })
    }

    fn action_rows(&self, x: usize) -> DMatrix<f64> {
        // successors × actions
        let succ = &self.successors[x];
        DMatrix::from_fn(succ.len(), self.mdp.n_actions(), |k, a| self.mdp.p[x][a][succ[k]])
    }
}

impl TabularChain for PolicyChain {
    fn n_states(&self) -> usize {
        self.mdp.n_states()
    }

    fn n_params(&self) -> usize {
        self.policy.n_params()
    }

    fn terminals(&self) -> &[usize] {
        &self.mdp.terminals
    }

    fn row(&self, x: usize, theta: &[f64], t: usize) -> TabularRow {
        let n_params = self.policy.n_params();
        if self.is_terminal_state(x) {
            return TabularRow { successors: vec![x], probs: vec![1.0], scores: DMatrix::zeros(1, n_params) };
        }
        let pi = DVector::from_vec(self.policy.probs(x, theta));
        let probs: Vec<f64> = (self.action_rows(x) * pi).iter().copied().collect();
        let mut scores = self.row_prob_grad(x, theta, t);
        for (k, p) in probs.iter().enumerate() {
            scores.row_mut(k).scale_mut(if *p > 0.0 { 1.0 / p } else { 0.0 });
        }
        TabularRow { successors: self.successors[x].clone(), probs, scores }
    }

    fn row_prob_grad(&self, x: usize, theta: &[f64], _t: usize) -> DMatrix<f64> {
        if self.is_terminal_state(x) {
            return DMatrix::zeros(1, self.policy.n_params());
        }
        let pi = self.policy.probs(x, theta);
        let mut dpi = self.policy.scores(x, theta);
        for (a, p) in pi.iter().enumerate() {
            dpi.row_mut(a).scale_mut(*p);
        }
        self.action_rows(x) * dpi
    }

    fn row_score_hessians(&self, x: usize, theta: &[f64], t: usize) -> Option<Vec<DMatrix<f64>>> {
        let n = self.policy.n_params();
        if self.is_terminal_state(x) {
            return Some(vec![DMatrix::zeros(n, n)]);
        }
        let hs = self.policy.score_hessians(x, theta)?;
        let pi = self.policy.probs(x, theta);
        let s = self.policy.scores(x, theta);
        // ∇²π_a = π_a (s_a s_aᵀ + ∇² ln π_a)
        let d2pi: Vec<DMatrix<f64>> = (0..pi.len())
            .map(|a| {
                let sa = s.row(a).transpose();
                (&sa * sa.transpose() + &hs[a]) * pi[a]
            })
            .collect();
        let row = self.row(x, theta, t);
        let rows = self.action_rows(x);
        let out = (0..row.successors.len())
            .map(|k| {
                let p = row.probs[k];
                if p <= 0.0 {
                    return DMatrix::zeros(n, n);
                }
                let mut d2p = DMatrix::zeros(n, n);
                for (a, h) in d2pi.iter().enumerate() {
                    d2p += h * rows[(k, a)];
                }
                let sk = row.scores.row(k).transpose();
                d2p / p - &sk * sk.transpose()
            })
            .collect();
        Some(out)
    }
}

/// `L(x,θ) = Σ_a π(a|x,θ) ℓ(x,a,θ)`.
pub struct PolicyAveragedCost {
    policy: Arc<dyn TabularPolicy>,
    cost: Arc<dyn ActionCost>,
}

impl PolicyAveragedCost {
    pub fn new(policy: Arc<dyn TabularPolicy>, cost: Arc<dyn ActionCost>) -> Result<Self> {
        if policy.n_params() != cost.n_params() {
            return invalid("policy and action cost read different parameter counts");
        }
        Ok(Self { policy, cost })
    }
}

impl Cost<usize> for PolicyAveragedCost {
    fn n_params(&self) -> usize {
        self.policy.n_params()
    }

    fn value(&self, x: &usize, theta: &[f64], _t: usize) -> f64 {
        let pi = self.policy.probs(*x, theta);
        pi.iter().enumerate().map(|(a, p)| p * self.cost.value(*x, a, theta)).sum()
    }

    fn grad(&self, x: &usize, theta: &[f64], _t: usize) -> DVector<f64> {
        let pi = self.policy.probs(*x, theta);
        let s = self.policy.scores(*x, theta);
        let mut g = DVector::zeros(self.n_params());
        for (a, p) in pi.iter().enumerate() {
            let term = s.row(a).transpose() * self.cost.value(*x, a, theta) + self.cost.grad(*x, a, theta);
            g.axpy(*p, &term, 1.0);
        }
        g
    }

    fn hessian(&self, x: &usize, theta: &[f64], _t: usize) -> Option<DMatrix<f64>> {
        let hs = self.policy.score_hessians(*x, theta)?;
        let pi = self.policy.probs(*x, theta);
        let s = self.policy.scores(*x, theta);
        let n = self.n_params();
        let mut h = DMatrix::zeros(n, n);
        for (a, p) in pi.iter().enumerate() {
            let sa = s.row(a).transpose();
            let l = self.cost.value(*x, a, theta);
            let gl = self.cost.grad(*x, a, theta);
            let hl = self.cost.hessian(*x, a, theta)?;
            h += ((&sa * sa.transpose() + &hs[a]) * l + &sa * gl.transpose() + &gl * sa.transpose() + hl) * *p;
        }
        Some(h)
    }
}

/// `KL(π_old(·|x) ‖ π(·|x,θ))`, infinite where π drops mass π_old keeps.
pub struct PolicyKlCost {
    policy: Arc<dyn TabularPolicy>,
    old: Vec<Vec<f64>>,
}

impl Cost<usize> for PolicyKlCost {
    fn n_params(&self) -> usize {
        self.policy.n_params()
    }

    fn value(&self, x: &usize, theta: &[f64], _t: usize) -> f64 {
        let pi = self.policy.probs(*x, theta);
        self.old[*x]
            .iter()
            .zip(&pi)
            .map(|(o, p)| if *o > 0.0 { o * (o / p).ln() } else { 0.0 })
            .sum()
    }

    fn grad(&self, x: &usize, theta: &[f64], _t: usize) -> DVector<f64> {
        let s = self.policy.scores(*x, theta);
        -(s.transpose() * DVector::from_column_slice(&self.old[*x]))
    }

    fn hessian(&self, x: &usize, theta: &[f64], _t: usize) -> Option<DMatrix<f64>> {
        let hs = self.policy.score_hessians(*x, theta)?;
        let n = self.n_params();
        let mut h = DMatrix::zeros(n, n);
        for (o, ha) in self.old[*x].iter().zip(&hs) {
            h -= ha * *o;
        }
        Some(h)
    }
}

/// Zeroes a cost at terminal states.
pub struct TerminalMask {
    inner: Arc<dyn Cost<usize>>,
    terminals: Vec<usize>,
}

impl TerminalMask {
    pub fn new(inner: Arc<dyn Cost<usize>>, terminals: Vec<usize>) -> Self {
        Self { inner, terminals }
    }
}

impl Cost<usize> for TerminalMask {
    fn n_params(&self) -> usize {
        self.inner.n_params()
    }

    fn value(&self, x: &usize, theta: &[f64], t: usize) -> f64 {
        if self.terminals.contains(x) {
            0.0
        } else {
            self.inner.value(x, theta, t)
        }
    }

    fn grad(&self, x: &usize, theta: &[f64], t: usize) -> DVector<f64> {
        if self.terminals.contains(x) {
            DVector::zeros(self.n_params())
        } else {
            self.inner.grad(x, theta, t)
        }
    }

    fn hessian(&self, x: &usize, theta: &[f64], t: usize) -> Option<DMatrix<f64>> {
        if self.terminals.contains(x) {
            Some(DMatrix::zeros(self.n_params(), self.n_params()))
        } else {
            self.inner.hessian(x, theta, t)
        }
    }
}

fn masked(cost: Arc<dyn Cost<usize>>, terminals: &[usize]) -> Arc<dyn Cost<usize>> {
    Arc::new(TerminalMask::new(cost, terminals.to_vec()))
}

/// Policy-averaged chain and cost `Σ_a π ℓ(x,a,θ)`.
pub fn map_gmdp(
    mdp: Arc<TabularMdp>,
    policy: Arc<dyn TabularPolicy>,
    cost: Arc<dyn ActionCost>,
    setting: Setting,
    p0: InitialDistribution,
) -> Result<TabularProblem> {
    let terminals = mdp.terminals.clone();
    let chain = Arc::new(PolicyChain::new(mdp, policy.clone())?);
    let cost = masked(Arc::new(PolicyAveragedCost::new(policy, cost)?), &terminals);
    TabularProblem::new(chain, cost, setting, p0)
}

/// Policy-averaged chain and cost `Σ_a π r(x,a)`.
pub fn map_smdp(
    mdp: Arc<TabularMdp>,
    policy: Arc<dyn TabularPolicy>,
    setting: Setting,
    p0: InitialDistribution,
) -> Result<TabularProblem> {
    let cost = Arc::new(ActionCostTable::new(mdp.r.clone(), policy.n_params()));
    map_gmdp(mdp, policy, cost, setting, p0)
}

/// S-mapping cost plus the policy entropy `H[π(·|x,θ)]`.
pub fn map_hmdp(
    mdp: Arc<TabularMdp>,
    policy: Arc<dyn TabularPolicy>,
    setting: Setting,
    p0: InitialDistribution,
) -> Result<TabularProblem> {
    let base = map_smdp(mdp.clone(), policy.clone(), setting, p0.clone())?;
    let entropy: Arc<dyn Cost<usize>> = Arc::new(cost_policy_entropy(policy));
    let cost = masked(Arc::new(cost_sum(vec![base.cost.clone(), entropy], vec![1.0, 1.0])?), &mdp.terminals);
    TabularProblem::new(base.chain, cost, setting, p0)
}

/// S-mapping cost plus `KL(π_old ‖ π)`.
pub fn map_rmdp(
    mdp: Arc<TabularMdp>,
    policy: Arc<dyn TabularPolicy>,
    old: Vec<Vec<f64>>,
    setting: Setting,
    p0: InitialDistribution,
) -> Result<TabularProblem> {
    if old.len() != mdp.n_states() || old.iter().any(|row| row.len() != mdp.n_actions()) {
        return invalid("old policy table has the wrong shape");
    }
    let theta = vec![0.0; policy.n_params()];
    for x in (0..mdp.n_states()).filter(|x| !mdp.terminals.contains(x)) {
        let total: f64 = old[x].iter().sum();
        if (total - 1.0).abs() > NORMALIZATION_TOL {
            return invalid(format!("old policy row {x} sums to {total}"));
        }
        let pi = policy.probs(x, &theta);
        if old[x].iter().zip(&pi).any(|(o, p)| *o > 0.0 && *p <= 0.0) {
            return Err(DsoError::DivergenceUndefined(format!(
                "policy drops an action the old policy takes at state {x}"
            )));
        }
    }
    let base = map_smdp(mdp.clone(), policy.clone(), setting, p0.clone())?;
    let kl: Arc<dyn Cost<usize>> = Arc::new(PolicyKlCost { policy, old });
    let cost = masked(Arc::new(cost_sum(vec![base.cost.clone(), kl], vec![1.0, 1.0])?), &mdp.terminals);
    TabularProblem::new(base.chain, cost, setting, p0)
}

/// Linearly-solvable problem: fixed baseline chain `p̄`, state cost `r`.
#[derive(Debug, Clone)]
pub struct LmdpSpec {
    pub baseline: Arc<FixedChain>,
    pub r: Vec<f64>,
    pub terminals: Vec<usize>,
}

impl LmdpSpec {
    pub fn new(baseline: Arc<FixedChain>, r: Vec<f64>) -> Result<Self> {
        if r.len() != baseline.n_states() || r.iter().any(|v| !v.is_finite()) {
            return invalid("state cost must be finite with one entry per state");
        }
        let terminals = baseline.terminals().to_vec();
        if terminals.iter().any(|&x| r[x] != 0.0) {
            return invalid("terminal states must cost nothing");
        }
        Ok(Self { baseline, r, terminals })
    }

    pub fn n_states(&self) -> usize {
        self.r.len()
    }
}

/// The given chain with cost `r(x) + KL(P(·|x,θ) ‖ p̄(·|x))`.
pub fn map_lmdp(
    spec: &LmdpSpec,
    chain: Arc<dyn TabularChain>,
    setting: Setting,
    p0: InitialDistribution,
) -> Result<TabularProblem> {
    let n_params = chain.n_params();
    let kl: Arc<dyn Cost<usize>> = Arc::new(cost_kl_to_fixed(chain.clone(), spec.baseline.clone())?);
    let r: Arc<dyn Cost<usize>> = Arc::new(crate::model::TableCost::new(spec.r.clone(), n_params));
    let cost = masked(Arc::new(cost_sum(vec![r, kl], vec![1.0, 1.0])?), &spec.terminals);
    TabularProblem::new(chain, cost, setting, p0)
}

/// Bottleneck whose cost is `r(x) + KL(P̃(·|x,η) ‖ p̄(·|x))` over another
/// bottleneck's kernel.
pub struct StateKlBottleneck {
    inner: Arc<dyn Bottleneck>,
    r: Vec<f64>,
    baseline: Arc<FixedChain>,
}

impl StateKlBottleneck {
    fn log_ratios(&self, x: usize, eta: &DVector<f64>) -> (Vec<f64>, Vec<f64>) {
        let probs = self.inner.kernel(x, eta);
        let lr = self
            .inner
            .successors(x)
            .iter()
            .zip(&probs)
            .map(|(s, p)| if *p > 0.0 { (p / self.baseline.prob(x, *s)).ln() } else { 0.0 })
            .collect();
        (probs, lr)
    }
}

impl Bottleneck for StateKlBottleneck {
    fn n_states(&self) -> usize {
        self.inner.n_states()
    }
    fn n_params(&self) -> usize {
        self.inner.n_params()
    }
    fn n_eta(&self) -> usize {
        self.inner.n_eta()
    }
    fn terminals(&self) -> &[usize] {
        self.inner.terminals()
    }
    fn mu(&self, x: usize, theta: &[f64]) -> DVector<f64> {
        self.inner.mu(x, theta)
    }
    fn mu_jacobian(&self, x: usize, theta: &[f64]) -> DMatrix<f64> {
        self.inner.mu_jacobian(x, theta)
    }
    fn successors(&self, x: usize) -> &[usize] {
        self.inner.successors(x)
    }
    fn kernel(&self, x: usize, eta: &DVector<f64>) -> Vec<f64> {
        self.inner.kernel(x, eta)
    }
    fn kernel_grad(&self, x: usize, eta: &DVector<f64>) -> DMatrix<f64> {
        self.inner.kernel_grad(x, eta)
    }
    fn cost(&self, x: usize, eta: &DVector<f64>) -> f64 {
        let (probs, lr) = self.log_ratios(x, eta);
        self.r[x] + probs.iter().zip(&lr).map(|(p, l)| p * l).sum::<f64>()
    }
    fn cost_grad(&self, x: usize, eta: &DVector<f64>) -> DVector<f64> {
        // the kernel stays normalized in η, so Σ ∇ηP̃ = 0 removes the +1 term
        let (_, lr) = self.log_ratios(x, eta);
        self.inner.kernel_grad(x, eta).transpose() * DVector::from_vec(lr)
    }
}

/// Action-free form of an S-MDP: `η = π(·|x,θ)` drives the policy-averaged
/// kernel and cost. Returns the bottleneck and its problem.
pub fn build_dmdp_from_smdp(
    mdp: Arc<TabularMdp>,
    policy: Arc<dyn TabularPolicy>,
    setting: Setting,
    p0: InitialDistribution,
) -> Result<(Arc<MixtureBottleneck>, TabularProblem)> {
    let b = Arc::new(MixtureBottleneck::new(&mdp.p, mdp.r.clone(), mdp.terminals.clone(), policy)?);
    let problem = TabularProblem::new(
        Arc::new(BottleneckChain::new(b.clone())),
        Arc::new(BottleneckCost::new(b.clone())),
        setting,
        p0,
    )?;
    Ok((b, problem))
}

/// The pair (bottleneck problem with cost `r_L + KL(p(·|x,η) ‖ p̄)`,
/// linearly-solvable problem on the same chain). Both must coincide.
pub fn build_dmdp_lmdp_pair(
    transitions: &[Vec<Vec<f64>>],
    policy: Arc<dyn TabularPolicy>,
    baseline: Arc<FixedChain>,
    r_l: Vec<f64>,
    setting: Setting,
    p0: InitialDistribution,
) -> Result<(TabularProblem, TabularProblem)> {
    let terminals = baseline.terminals().to_vec();
    for (x, actions) in transitions.iter().enumerate() {
        for row in actions {
            if let Some(y) = (0..row.len()).find(|&y| row[y] > 0.0 && baseline.prob(x, y) <= 0.0) {
                return Err(DsoError::DivergenceUndefined(format!(
                    "an action moves {x} -> {y} where the baseline has no mass"
                )));
            }
        }
    }
    let spec = LmdpSpec::new(baseline.clone(), r_l.clone())?;
    let zero_costs = vec![vec![0.0; policy.n_actions()]; transitions.len()];
    let mixture: Arc<dyn Bottleneck> =
        Arc::new(MixtureBottleneck::new(transitions, zero_costs, terminals, policy)?);
    let d_side: Arc<dyn Bottleneck> = Arc::new(StateKlBottleneck { inner: mixture, r: r_l, baseline });
    let chain = Arc::new(BottleneckChain::new(d_side.clone()));
    let d_problem =
        TabularProblem::new(chain.clone(), Arc::new(BottleneckCost::new(d_side)), setting, p0.clone())?;
    let l_problem = map_lmdp(&spec, chain, setting, p0)?;
    Ok((d_problem, l_problem))
}

/// Exact policy evaluation over state-action pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyEvaluation {
    /// `v(x) = Σ_a π Q(x,a)`; differential and `d`-centered in the average setting.
    pub values: DVector<f64>,
    /// `Q(x,a)` for every pair (average setting: `ℓ - J + Σ p v`).
    pub q: Vec<Vec<f64>>,
    pub j: Option<f64>,
    /// State occupancy (episodic) or stationary density (average).
    pub density: DVector<f64>,
}

/// Evaluates a policy from its numeric tables by solving for `Q` over the
/// state-action chain `M((x,a),(x',a')) = p(x'|x,a) π(a'|x')`.
///
/// Only pairs with `π(a|x) > 0` enter the system; terminal pairs are fixed
/// at zero in the first-exit setting.
pub fn evaluate_policy(
    p: &[Vec<Vec<f64>>],
    cost: &[Vec<f64>],
    pi: &[Vec<f64>],
    terminals: &[usize],
    setting: Setting,
    p0: &[f64],
) -> Result<PolicyEvaluation> {
    let n = p.len();
    let m = pi[0].len();
    let first_exit = setting == Setting::FirstExit;
    let gamma = setting.gamma();
    let pairs: Vec<(usize, usize)> = (0..n)
        .filter(|x| !(first_exit && terminals.contains(x)))
        .flat_map(|x| (0..m).map(move |a| (x, a)))
        .filter(|&(x, a)| pi[x][a] > 0.0)
        .collect();
    let k = pairs.len();
    let mut index = vec![vec![None; m]; n];
    for (i, &(x, a)) in pairs.iter().enumerate() {
        index[x][a] = Some(i);
    }
    let mut trans = DMatrix::zeros(k, k);
    for (i, &(x, a)) in pairs.iter().enumerate() {
        for (j, &(y, b)) in pairs.iter().enumerate() {
            trans[(i, j)] = p[x][a][y] * pi[y][b];
        }
    }
    let ell = DVector::from_fn(k, |i, _| cost[pairs[i].0][pairs[i].1]);
    let (q_pairs, j, pair_density) = match setting {
        Setting::EpisodicDiscounted { .. } | Setting::FirstExit => {
            let q = (DMatrix::identity(k, k) - &trans * gamma)
                .lu()
                .solve(&ell)
                .ok_or_else(|| DsoError::Solve("state-action evaluation is singular".into()))?;
            let start = DVector::from_fn(k, |i, _| p0[pairs[i].0] * pi[pairs[i].0][pairs[i].1]);
            let rho = (DMatrix::identity(k, k) - trans.transpose() * gamma)
                .lu()
                .solve(&start)
                .ok_or_else(|| DsoError::Solve("state-action occupancy is singular".into()))?;
            (q, None, rho)
        }
        Setting::Average => {
            let (j, q, d) = average_value_of_matrix(&trans, &ell)?;
            (q, Some(j), d)
        }
        Setting::TimeVarying { .. } => return invalid("policy evaluation is time-invariant"),
    };
    let mut values = DVector::zeros(n);
    let mut density = DVector::zeros(n);
    for (i, &(x, a)) in pairs.iter().enumerate() {
        values[x] += pi[x][a] * q_pairs[i];
        density[x] += pair_density[i];
    }
    if first_exit {
        for &t in terminals {
            density[t] = p0[t] + pairs.iter().enumerate().map(|(i, &(x, a))| pair_density[i] * p[x][a][t]).sum::<f64>();
        }
    }
    let shift = j.unwrap_or(0.0);
    let q = (0..n)
        .map(|x| {
            (0..m)
                .map(|a| {
                    if first_exit && terminals.contains(&x) {
                        return 0.0;
                    }
                    match index[x][a] {
                        Some(i) => q_pairs[i],
                        None => cost[x][a] - shift + gamma * (0..n).map(|y| p[x][a][y] * values[y]).sum::<f64>(),
                    }
                })
                .collect()
        })
        .collect();
    Ok(PolicyEvaluation { values, q, j, density })
}

/// Policy probability table at θ.
pub fn policy_table(policy: &dyn TabularPolicy, theta: &[f64]) -> Vec<Vec<f64>> {
    (0..policy.n_states()).map(|x| policy.probs(x, theta)).collect()
}

/// Classical stochastic-policy gradient `Σ_x w(x) Σ_a ∇π(a|x,θ) Q(x,a)`.
pub fn smdp_policy_gradient_oracle(
    mdp: &TabularMdp,
    policy: &dyn TabularPolicy,
    setting: Setting,
    p0: &[f64],
    theta: &[f64],
) -> Result<DVector<f64>> {
    let pi = policy_table(policy, theta);
    let ev = evaluate_policy(&mdp.p, &mdp.r, &pi, &mdp.terminals, setting, p0)?;
    let mut g = DVector::zeros(policy.n_params());
    for x in 0..mdp.n_states() {
        if setting == Setting::FirstExit && mdp.terminals.contains(&x) {
            continue;
        }
        let s = policy.scores(x, theta);
        for a in 0..mdp.n_actions() {
            g.axpy(ev.density[x] * pi[x][a] * ev.q[x][a], &s.row(a).transpose(), 1.0);
        }
    }
    Ok(g)
}

/// Deterministic-policy gradient through a bottleneck:
/// `Σ_x w(x) ∇θμ ∇ηQ̃(x,η)|_{η=μ}` with `∇ηQ̃ = ∇ηL̃ + γ Σ ∇ηP̃ v`.
///
/// `v` and `w` come from evaluating the one-action MDP `a = μ(x,θ)`.
pub fn dpg_gradient_oracle(problem: &TabularProblem, theta: &[f64]) -> Result<DVector<f64>> {
    let b = problem
        .chain
        .bottleneck()
        .ok_or_else(|| DsoError::Capability("chain has no bottleneck structure".into()))?;
    let n = b.n_states();
    let mut p = vec![vec![vec![0.0; n]]; n];
    let mut cost = vec![vec![0.0]; n];
    for x in 0..n {
        if b.terminals().contains(&x) {
            p[x][0][x] = 1.0;
            continue;
        }
        let eta = b.mu(x, theta);
        for (s, q) in b.successors(x).iter().zip(b.kernel(x, &eta)) {
            p[x][0][*s] = q;
        }
        cost[x][0] = b.cost(x, &eta);
    }
    let pi = vec![vec![1.0]; n];
    let ev = evaluate_policy(&p, &cost, &pi, b.terminals(), problem.setting, problem.p0_weights())?;
    let gamma = problem.gamma();
    let mut g = DVector::zeros(b.n_params());
    for x in 0..n {
        if b.terminals().contains(&x) {
            continue;
        }
        let eta = b.mu(x, theta);
        let v = DVector::from_iterator(b.successors(x).len(), b.successors(x).iter().map(|&s| ev.values[s]));
        let dq = b.cost_grad(x, &eta) + b.kernel_grad(x, &eta).transpose() * v * gamma;
        g.axpy(ev.density[x], &(b.mu_jacobian(x, theta) * dq), 1.0);
    }
    Ok(g)
}

/// Evaluation of a linearly-solvable chain as an MDP whose action is the next
/// state, with `π = P` and `ℓ(x,a) = r(x) + ln(P(a|x)/p̄(a|x))`.
pub fn evaluate_lmdp_chain(
    spec: &LmdpSpec,
    chain: &dyn TabularChain,
    theta: &[f64],
    setting: Setting,
    p0: &[f64],
) -> Result<PolicyEvaluation> {
    let n = spec.n_states();
    let p: Vec<Vec<Vec<f64>>> = (0..n)
        .map(|_| (0..n).map(|a| (0..n).map(|y| f64::from(u8::from(a == y))).collect()).collect())
        .collect();
    let mut pi = vec![vec![0.0; n]; n];
    let mut cost = vec![vec![0.0; n]; n];
    for x in 0..n {
        let row = chain.row(x, theta, 0);
        for (s, q) in row.successors.iter().zip(&row.probs) {
            pi[x][*s] = *q;
            if !spec.terminals.contains(&x) && *q > 0.0 {
                cost[x][*s] = spec.r[x] + (q / spec.baseline.prob(x, *s)).ln();
            }
        }
    }
    evaluate_policy(&p, &cost, &pi, &spec.terminals, setting, p0)
}

/// `Σ_x d(x) Σ_{x'} ∇θP(x'|x,θ) (ln(P/p̄) + v(x'))` from given `d` and `v`.
pub fn lmdp_gradient_from(
    spec: &LmdpSpec,
    chain: &dyn TabularChain,
    theta: &[f64],
    density: &DVector<f64>,
    values: &DVector<f64>,
) -> DVector<f64> {
    let mut g = DVector::zeros(chain.n_params());
    for x in 0..spec.n_states() {
        if spec.terminals.contains(&x) {
            continue;
        }
        let row = chain.row(x, theta, 0);
        let dp = chain.row_prob_grad(x, theta, 0);
        let w = DVector::from_iterator(
            row.successors.len(),
            row.successors.iter().zip(&row.probs).map(|(s, q)| {
                let lr = if *q > 0.0 { (q / spec.baseline.prob(x, *s)).ln() } else { 0.0 };
                lr + values[*s]
            }),
        );
        g.axpy(density[x], &(dp.transpose() * w), 1.0);
    }
    g
}

/// Average-cost gradient of a linearly-solvable chain from its classical formula.
pub fn lmdp_policy_gradient_oracle(
    spec: &LmdpSpec,
    chain: &dyn TabularChain,
    theta: &[f64],
) -> Result<DVector<f64>> {
    let n = spec.n_states();
    let uniform = vec![1.0 / n as f64; n];
    let ev = evaluate_lmdp_chain(spec, chain, theta, Setting::Average, &uniform)?;
    Ok(lmdp_gradient_from(spec, chain, theta, &ev.density, &ev.values))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::exact::{cost_vector, exact_gradient, solve_value_episodic, transition_matrix};

    fn small_mdp() -> TabularMdp {
        let p = vec![
            vec![vec![0.5, 0.5, 0.0], vec![0.1, 0.2, 0.7]],
            vec![vec![0.3, 0.3, 0.4], vec![0.0, 0.0, 1.0]],
            vec![vec![0.0, 0.0, 1.0], vec![0.0, 0.0, 1.0]],
        ];
        let r = vec![vec![1.0, 2.0], vec![0.5, 3.0], vec![0.0, 0.0]];
        TabularMdp::new(p, r, vec![2]).unwrap()
    }

    #[test]
    fn one_hot_policy_selects_its_action() {
        let mdp = Arc::new(small_mdp());
        let policy = Arc::new(TablePolicy::new(vec![vec![0.0, 1.0], vec![1.0, 0.0], vec![1.0, 0.0]], 0).unwrap());
        let pr = map_smdp(mdp, policy, Setting::FirstExit, InitialDistribution::point(3, 0)).unwrap();
        let p = transition_matrix(pr.chain.as_ref(), &[], 0);
        assert_eq!(p.row(0).iter().copied().collect::<Vec<_>>(), vec![0.1, 0.2, 0.7]);
        assert_eq!(cost_vector(&pr, &[], 0)[0], 2.0);
    }

    #[test]
    fn mapped_value_equals_state_action_evaluation() {
        let mdp = Arc::new(small_mdp());
        let policy = Arc::new(SoftmaxPolicy::new(3, 2));
        let theta = [0.3, -0.2, 1.0, 0.4, 0.0, 0.0];
        let pr = map_smdp(mdp.clone(), policy.clone(), Setting::FirstExit, InitialDistribution::point(3, 0)).unwrap();
        let v = solve_value_episodic(&pr, &theta).unwrap().values;
        let pi = policy_table(policy.as_ref(), &theta);
        let ev = evaluate_policy(mdp.transitions(), mdp.costs(), &pi, &[2], Setting::FirstExit, pr.p0_weights()).unwrap();
        assert!((v - ev.values).amax() < 1e-12);
    }

    #[test]
    fn classical_gradient_matches() {
        let mdp = Arc::new(small_mdp());
        let policy = Arc::new(SoftmaxPolicy::new(3, 2));
        let theta = [0.3, -0.2, 1.0, 0.4, 0.0, 0.0];
        let pr = map_smdp(mdp.clone(), policy.clone(), Setting::FirstExit, InitialDistribution::point(3, 0)).unwrap();
        let g = exact_gradient(&pr, &theta).unwrap();
        let o = smdp_policy_gradient_oracle(&mdp, policy.as_ref(), Setting::FirstExit, pr.p0_weights(), &theta).unwrap();
        assert!((g - o).amax() < 1e-12);
    }

    #[test]
    fn kl_regularizer_vanishes_at_the_old_policy() {
        let mdp = Arc::new(small_mdp());
        let policy = Arc::new(SoftmaxPolicy::new(3, 2));
        let theta = [0.3, -0.2, 1.0, 0.4, 0.0, 0.0];
        let old = policy_table(policy.as_ref(), &theta);
        let pr = map_rmdp(mdp.clone(), policy.clone(), old, Setting::FirstExit, InitialDistribution::point(3, 0)).unwrap();
        let s = map_smdp(mdp, policy, Setting::FirstExit, InitialDistribution::point(3, 0)).unwrap();
        assert!((cost_vector(&pr, &theta, 0) - cost_vector(&s, &theta, 0)).amax() < 1e-15);
    }

    #[test]
    fn dropped_old_action_is_a_divergence_error() {
        let mdp = Arc::new(small_mdp());
        let policy = Arc::new(TablePolicy::new(vec![vec![1.0, 0.0]; 3], 0).unwrap());
        let old = vec![vec![0.5, 0.5]; 3];
        let err = map_rmdp(mdp, policy, old, Setting::FirstExit, InitialDistribution::point(3, 0)).err().unwrap();
        assert!(matches!(err, DsoError::DivergenceUndefined(_)));
    }
}
