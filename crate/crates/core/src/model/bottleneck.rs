use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use super::{Cost, TabularChain, TabularPolicy, TabularRow, NORMALIZATION_TOL};
use crate::error::{invalid, Result};

/// Tabular chain and cost that depend on θ only through `η = μ(x,θ)`:
/// `P(x'|x,θ) = P̃(x'|x,η)` and `L(x,θ) = L̃(x,η)`.
///
/// Terminal states are absorbing with zero cost whatever η is.
pub trait Bottleneck: Send + Sync {
    fn n_states(&self) -> usize;
    fn n_params(&self) -> usize;
    fn n_eta(&self) -> usize;
    fn terminals(&self) -> &[usize];

    fn mu(&self, x: usize, theta: &[f64]) -> DVector<f64>;

    /// `∇θμ` as an `n_θ × n_η` matrix.
    fn mu_jacobian(&self, x: usize, theta: &[f64]) -> DMatrix<f64>;

    /// Successors of a nonterminal state; the same for every η.
    fn successors(&self, x: usize) -> &[usize];

    /// `P̃(successor_k|x,η)`.
    fn kernel(&self, x: usize, eta: &DVector<f64>) -> Vec<f64>;

    /// `∇ηP̃` as a `successors × n_η` matrix.
    fn kernel_grad(&self, x: usize, eta: &DVector<f64>) -> DMatrix<f64>;

    fn cost(&self, x: usize, eta: &DVector<f64>) -> f64;

    fn cost_grad(&self, x: usize, eta: &DVector<f64>) -> DVector<f64>;
}

/// The chain `P(x'|x,θ) = P̃(x'|x,μ(x,θ))` of a bottleneck.
#[derive(Clone)]
pub struct BottleneckChain {
    inner: Arc<dyn Bottleneck>,
}

impl BottleneckChain {
    pub fn new(inner: Arc<dyn Bottleneck>) -> Self {
        Self { inner }
    }

    pub fn inner(&self) -> &Arc<dyn Bottleneck> {
        &self.inner
    }
}

impl TabularChain for BottleneckChain {
    fn n_states(&self) -> usize {
        self.inner.n_states()
    }

    fn n_params(&self) -> usize {
        self.inner.n_params()
    }

    fn terminals(&self) -> &[usize] {
        self.inner.terminals()
    }

    fn row(&self, x: usize, theta: &[f64], t: usize) -> TabularRow {
        if self.is_terminal_state(x) {
            return TabularRow {
                successors: vec![x],
                probs: vec![1.0],
                scores: DMatrix::zeros(1, self.inner.n_params()),
            };
        }
        let eta = self.inner.mu(x, theta);
        let probs = self.inner.kernel(x, &eta);
        let mut scores = self.row_prob_grad(x, theta, t);
        for (k, p) in probs.iter().enumerate() {
            let inv = if *p > 0.0 { 1.0 / p } else { 0.0 };
            scores.row_mut(k).scale_mut(inv);
        }
        TabularRow { successors: self.inner.successors(x).to_vec(), probs, scores }
    }

    fn row_prob_grad(&self, x: usize, theta: &[f64], _t: usize) -> DMatrix<f64> {
        if self.is_terminal_state(x) {
            return DMatrix::zeros(1, self.inner.n_params());
        }
        let eta = self.inner.mu(x, theta);
        self.inner.kernel_grad(x, &eta) * self.inner.mu_jacobian(x, theta).transpose()
    }

    fn bottleneck(&self) -> Option<&dyn Bottleneck> {
        Some(self.inner.as_ref())
    }
}

/// The cost `L(x,θ) = L̃(x,μ(x,θ))` of a bottleneck.
#[derive(Clone)]
pub struct BottleneckCost {
    inner: Arc<dyn Bottleneck>,
}

impl BottleneckCost {
    pub fn new(inner: Arc<dyn Bottleneck>) -> Self {
        Self { inner }
    }
}

impl Cost<usize> for BottleneckCost {
    fn n_params(&self) -> usize {
        self.inner.n_params()
    }

    fn value(&self, x: &usize, theta: &[f64], _t: usize) -> f64 {
        if self.inner.terminals().contains(x) {
            return 0.0;
        }
        self.inner.cost(*x, &self.inner.mu(*x, theta))
    }

    fn grad(&self, x: &usize, theta: &[f64], _t: usize) -> DVector<f64> {
        if self.inner.terminals().contains(x) {
            return DVector::zeros(self.inner.n_params());
        }
        let eta = self.inner.mu(*x, theta);
        self.inner.mu_jacobian(*x, theta) * self.inner.cost_grad(*x, &eta)
    }
}

/// `μ(x,θ) = θ`: any tabular chain and cost viewed as a bottleneck.
pub struct IdentityBottleneck {
    chain: Arc<dyn TabularChain>,
    cost: Arc<dyn Cost<usize>>,
    successors: Vec<Vec<usize>>,
}

impl IdentityBottleneck {
    pub fn new(chain: Arc<dyn TabularChain>, cost: Arc<dyn Cost<usize>>) -> Result<Self> {
        if chain.n_params() != cost.n_params() {
            return invalid("chain and cost parameter counts differ");
        }
        let theta = vec![0.0; chain.n_params()];
        let successors = (0..chain.n_states()).map(|x| chain.row(x, &theta, 0).successors).collect();
        Ok(Self { chain, cost, successors })
    }
}

impl Bottleneck for IdentityBottleneck {
    fn n_states(&self) -> usize {
        self.chain.n_states()
    }

    fn n_params(&self) -> usize {
        self.chain.n_params()
    }

    fn n_eta(&self) -> usize {
        self.chain.n_params()
    }

    fn terminals(&self) -> &[usize] {
        self.chain.terminals()
    }

    fn mu(&self, _x: usize, theta: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(theta)
    }

    fn mu_jacobian(&self, _x: usize, theta: &[f64]) -> DMatrix<f64> {
        DMatrix::identity(theta.len(), theta.len())
    }

    fn successors(&self, x: usize) -> &[usize] {
        &self.successors[x]
    }

    fn kernel(&self, x: usize, eta: &DVector<f64>) -> Vec<f64> {
        self.chain.row(x, eta.as_slice(), 0).probs
    }

    fn kernel_grad(&self, x: usize, eta: &DVector<f64>) -> DMatrix<f64> {
        self.chain.row_prob_grad(x, eta.as_slice(), 0)
    }

    fn cost(&self, x: usize, eta: &DVector<f64>) -> f64 {
        self.cost.value(&x, eta.as_slice(), 0)
    }

    fn cost_grad(&self, x: usize, eta: &DVector<f64>) -> DVector<f64> {
        self.cost.grad(&x, eta.as_slice(), 0)
    }
}

/// Policy-averaged action model: `η = π(·|x,θ)`, `P̃ = Σ_a η_a p(·|x,a)`,
/// `L̃ = Σ_a η_a r(x,a)`.
pub struct MixtureBottleneck {
    /// `kernels[x][a]` is `p(·|x,a)` restricted to `successors[x]`.
    kernels: Vec<Vec<Vec<f64>>>,
    costs: Vec<Vec<f64>>,
    successors: Vec<Vec<usize>>,
    terminals: Vec<usize>,
    policy: Arc<dyn TabularPolicy>,
}

impl MixtureBottleneck {
    /// `transitions[x][a][x']` dense, `costs[x][a]`.
    pub fn new(
        transitions: &[Vec<Vec<f64>>],
        costs: Vec<Vec<f64>>,
        terminals: Vec<usize>,
        policy: Arc<dyn TabularPolicy>,
    ) -> Result<Self> {
        let n = transitions.len();
        let m = policy.n_actions();
        if policy.n_states() != n || costs.len() != n {
            return invalid("policy, transitions and costs disagree on the state count");
        }
        let mut successors = Vec::with_capacity(n);
        let mut kernels = Vec::with_capacity(n);
        for x in 0..n {
            if transitions[x].len() != m || costs[x].len() != m {
                return invalid(format!("state {x} does not list {m} actions"));
            }
            if terminals.contains(&x) {
                successors.push(vec![x]);
                kernels.push(vec![vec![1.0]; m]);
                continue;
            }
            let succ: Vec<usize> =
                (0..n).filter(|&y| transitions[x].iter().any(|row| row[y] > 0.0)).collect();
            for (a, row) in transitions[x].iter().enumerate() {
                let total: f64 = row.iter().sum();
                if row.len() != n || (total - 1.0).abs() > NORMALIZATION_TOL {
                    return invalid(format!("p(·|{x},{a}) is not a distribution over {n} states"));
                }
            }
            kernels.push(transitions[x].iter().map(|row| succ.iter().map(|&y| row[y]).collect()).collect());
            successors.push(succ);
        }
        Ok(Self { kernels, costs, successors, terminals, policy })
    }
}

impl Bottleneck for MixtureBottleneck {
    fn n_states(&self) -> usize {
        self.successors.len()
    }

    fn n_params(&self) -> usize {
        self.policy.n_params()
    }

    fn n_eta(&self) -> usize {
        self.policy.n_actions()
    }

    fn terminals(&self) -> &[usize] {
        &self.terminals
    }

    fn mu(&self, x: usize, theta: &[f64]) -> DVector<f64> {
        DVector::from_vec(self.policy.probs(x, theta))
    }

    fn mu_jacobian(&self, x: usize, theta: &[f64]) -> DMatrix<f64> {
        // ∇θπ_a = π_a ∇θ ln π_a
        let pi = self.policy.probs(x, theta);
        let mut j = self.policy.scores(x, theta).transpose();
        for (a, p) in pi.iter().enumerate() {
            j.column_mut(a).scale_mut(*p);
        }
        j
    }

    fn successors(&self, x: usize) -> &[usize] {
        &self.successors[x]
    }

    fn kernel(&self, x: usize, eta: &DVector<f64>) -> Vec<f64> {
        let mut out = vec![0.0; self.successors[x].len()];
        for (a, row) in self.kernels[x].iter().enumerate() {
            for (o, p) in out.iter_mut().zip(row) {
                *o += eta[a] * p;
            }
        }
        out
    }

    fn kernel_grad(&self, x: usize, _eta: &DVector<f64>) -> DMatrix<f64> {
        let rows = &self.kernels[x];
        DMatrix::from_fn(self.successors[x].len(), rows.len(), |k, a| rows[a][k])
    }

    fn cost(&self, x: usize, eta: &DVector<f64>) -> f64 {
        self.costs[x].iter().zip(eta.iter()).map(|(r, e)| r * e).sum()
    }

    fn cost_grad(&self, x: usize, _eta: &DVector<f64>) -> DVector<f64> {
        DVector::from_column_slice(&self.costs[x])
    }
}

/// One-dimensional bottleneck: `η = σ(w_xᵀθ)` mixes two fixed rows,
/// `P̃ = η p₁ + (1-η) p₂`, with cost `L̃ = r(x) + c(x) η²`.
pub struct ScalarMixtureBottleneck {
    weights: DMatrix<f64>,
    successors: Vec<Vec<usize>>,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
    base_cost: Vec<f64>,
    curvature: Vec<f64>,
    terminals: Vec<usize>,
}

impl ScalarMixtureBottleneck {
    /// `weights` is `n_states × n_θ`; `first`/`second` are dense rows per state.
    pub fn new(
        weights: DMatrix<f64>,
        first: &[Vec<f64>],
        second: &[Vec<f64>],
        base_cost: Vec<f64>,
        curvature: Vec<f64>,
        terminals: Vec<usize>,
    ) -> Result<Self> {
        let n = weights.nrows();
        if first.len() != n || second.len() != n || base_cost.len() != n || curvature.len() != n {
            return invalid("scalar bottleneck tables disagree on the state count");
        }
        let mut successors = Vec::with_capacity(n);
        let mut p1 = Vec::with_capacity(n);
        let mut p2 = Vec::with_capacity(n);
        for x in 0..n {
            if terminals.contains(&x) {
                successors.push(vec![x]);
                p1.push(vec![1.0]);
                p2.push(vec![1.0]);
                continue;
            }
            for row in [&first[x], &second[x]] {
                let total: f64 = row.iter().sum();
                if row.len() != n || (total - 1.0).abs() > NORMALIZATION_TOL {
                    return invalid(format!("mixture row for state {x} is not a distribution"));
                }
            }
            let succ: Vec<usize> = (0..n).filter(|&y| first[x][y] > 0.0 || second[x][y] > 0.0).collect();
            p1.push(succ.iter().map(|&y| first[x][y]).collect());
            p2.push(succ.iter().map(|&y| second[x][y]).collect());
            successors.push(succ);
        }
        Ok(Self { weights, successors, first: p1, second: p2, base_cost, curvature, terminals })
    }
}

impl Bottleneck for ScalarMixtureBottleneck {
    fn n_states(&self) -> usize {
        self.successors.len()
    }

    fn n_params(&self) -> usize {
        self.weights.ncols()
    }

    fn n_eta(&self) -> usize {
        1
    }

    fn terminals(&self) -> &[usize] {
        &self.terminals
    }

    fn mu(&self, x: usize, theta: &[f64]) -> DVector<f64> {
        let z: f64 = self.weights.row(x).iter().zip(theta).map(|(w, t)| w * t).sum();
        DVector::from_element(1, 1.0 / (1.0 + (-z).exp()))
    }

    fn mu_jacobian(&self, x: usize, theta: &[f64]) -> DMatrix<f64> {
        let s = self.mu(x, theta)[0];
        DMatrix::from_fn(self.weights.ncols(), 1, |i, _| self.weights[(x, i)] * s * (1.0 - s))
    }

    fn successors(&self, x: usize) -> &[usize] {
        &self.successors[x]
    }

    fn kernel(&self, x: usize, eta: &DVector<f64>) -> Vec<f64> {
        let e = eta[0];
        self.first[x].iter().zip(&self.second[x]).map(|(a, b)| e * a + (1.0 - e) * b).collect()
    }

    fn kernel_grad(&self, x: usize, _eta: &DVector<f64>) -> DMatrix<f64> {
        let d: Vec<f64> = self.first[x].iter().zip(&self.second[x]).map(|(a, b)| a - b).collect();
        DMatrix::from_vec(d.len(), 1, d)
    }

    fn cost(&self, x: usize, eta: &DVector<f64>) -> f64 {
        self.base_cost[x] + self.curvature[x] * eta[0] * eta[0]
    }

    fn cost_grad(&self, x: usize, eta: &DVector<f64>) -> DVector<f64> {
        DVector::from_element(1, 2.0 * self.curvature[x] * eta[0])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar() -> ScalarMixtureBottleneck {
        let w = DMatrix::from_row_slice(3, 2, &[1.0, -0.5, 0.3, 2.0, 0.0, 0.0]);
        let first = vec![vec![0.2, 0.3, 0.5], vec![0.0, 0.4, 0.6], vec![0.0, 0.0, 1.0]];
        let second = vec![vec![0.6, 0.0, 0.4], vec![0.5, 0.5, 0.0], vec![0.0, 0.0, 1.0]];
        ScalarMixtureBottleneck::new(w, &first, &second, vec![1.0, 2.0, 0.0], vec![0.5, -0.3, 0.0], vec![2])
            .unwrap()
    }

    #[test]
    fn chain_rows_are_normalized_and_scores_centered() {
        let chain = BottleneckChain::new(Arc::new(scalar()));
        let theta = [0.4, -1.2];
        for x in 0..3 {
            let row = chain.row(x, &theta, 0);
            assert!((row.probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            let centered = row.scores.transpose() * DVector::from_vec(row.probs.clone());
            assert!(centered.amax() < 1e-12);
        }
    }

    #[test]
    fn chain_rule_matches_finite_differences() {
        let b = Arc::new(scalar());
        let chain = BottleneckChain::new(b.clone());
        let cost = BottleneckCost::new(b);
        let theta = [0.4, -1.2];
        let h = 1e-6;
        for i in 0..2 {
            let mut plus = theta;
            let mut minus = theta;
            plus[i] += h;
            minus[i] -= h;
            let fd_cost = (cost.value(&1, &plus, 0) - cost.value(&1, &minus, 0)) / (2.0 * h);
            assert!((fd_cost - cost.grad(&1, &theta, 0)[i]).abs() < 1e-8);
            let dp = chain.row_prob_grad(0, &theta, 0);
            let (rp, rm) = (chain.row(0, &plus, 0), chain.row(0, &minus, 0));
            for k in 0..rp.probs.len() {
                assert!(((rp.probs[k] - rm.probs[k]) / (2.0 * h) - dp[(k, i)]).abs() < 1e-8);
            }
        }
    }
}
