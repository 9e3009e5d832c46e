use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use super::{Cost, FixedChain, TabularChain};
use crate::error::{invalid, DsoError, Result};

/// `r + gᵀθ + ½ θᵀHθ` at one (state, time).
#[derive(Debug, Clone, PartialEq)]
pub struct QuadraticTerm {
    pub constant: f64,
    pub linear: DVector<f64>,
    pub quadratic: DMatrix<f64>,
}

impl QuadraticTerm {
    pub fn constant(value: f64, n_params: usize) -> Self {
        Self {
            constant: value,
            linear: DVector::zeros(n_params),
            quadratic: DMatrix::zeros(n_params, n_params),
        }
    }
}

/// Tabular cost quadratic in θ, optionally time-indexed (`slices[t][x]`).
/// Time indices past the last slice reuse it.
#[derive(Debug, Clone)]
pub struct QuadraticCost {
    n_params: usize,
    slices: Vec<Vec<QuadraticTerm>>,
}

impl QuadraticCost {
    pub fn new(n_params: usize, slices: Vec<Vec<QuadraticTerm>>) -> Result<Self> {
        if slices.is_empty() {
            return invalid("cost needs at least one slice");
        }
        for term in slices.iter().flatten() {
            if term.linear.len() != n_params
                || term.quadratic.nrows() != n_params
                || term.quadratic.ncols() != n_params
            {
                return invalid("quadratic cost term has the wrong dimension");
            }
            if (&term.quadratic - term.quadratic.transpose()).amax() > 1e-12 {
                return invalid("quadratic cost term is not symmetric");
            }
        }
        Ok(Self { n_params, slices })
    }

    fn term(&self, x: usize, t: usize) -> &QuadraticTerm {
        &self.slices[t.min(self.slices.len() - 1)][x]
    }
}

impl Cost<usize> for QuadraticCost {
    fn n_params(&self) -> usize {
        self.n_params
    }

    fn value(&self, x: &usize, theta: &[f64], t: usize) -> f64 {
        let q = self.term(*x, t);
        let th = DVector::from_column_slice(theta);
        q.constant + q.linear.dot(&th) + 0.5 * th.dot(&(&q.quadratic * &th))
    }

    fn grad(&self, x: &usize, theta: &[f64], t: usize) -> DVector<f64> {
        let q = self.term(*x, t);
        &q.linear + &q.quadratic * DVector::from_column_slice(theta)
    }

    fn hessian(&self, x: &usize, _theta: &[f64], t: usize) -> Option<DMatrix<f64>> {
        Some(self.term(*x, t).quadratic.clone())
    }
}

/// θ-independent state cost `r_t(x)`.
#[derive(Debug, Clone)]
pub struct TableCost {
    n_params: usize,
    tables: Vec<Vec<f64>>,
}

impl TableCost {
    pub fn new(values: Vec<f64>, n_params: usize) -> Self {
        Self { n_params, tables: vec![values] }
    }

    /// One table per time index.
    pub fn time_varying(tables: Vec<Vec<f64>>, n_params: usize) -> Result<Self> {
        if tables.is_empty() {
            return invalid("cost needs at least one table");
        }
        Ok(Self { n_params, tables })
    }

    pub fn values(&self, t: usize) -> &[f64] {
        &self.tables[t.min(self.tables.len() - 1)]
    }
}

impl Cost<usize> for TableCost {
    fn n_params(&self) -> usize {
        self.n_params
    }

    fn value(&self, x: &usize, _theta: &[f64], t: usize) -> f64 {
        self.values(t)[*x]
    }

    fn grad(&self, _x: &usize, _theta: &[f64], _t: usize) -> DVector<f64> {
        DVector::zeros(self.n_params)
    }

    fn hessian(&self, _x: &usize, _theta: &[f64], _t: usize) -> Option<DMatrix<f64>> {
        Some(DMatrix::zeros(self.n_params, self.n_params))
    }
}

/// Weighted sum of costs over the same state space and parameters.
pub struct CostSum<S> {
    n_params: usize,
    parts: Vec<(f64, Arc<dyn Cost<S>>)>,
}

/// Builds `Σ wᵢ Lᵢ`; every part must read the same number of parameters.
pub fn cost_sum<S>(parts: Vec<Arc<dyn Cost<S>>>, weights: Vec<f64>) -> Result<CostSum<S>> {
    if parts.is_empty() {
        return invalid("cost sum needs at least one part");
    }
    if parts.len() != weights.len() {
        return invalid("cost sum needs one weight per part");
    }
    if weights.iter().any(|w| !w.is_finite()) {
        return invalid("cost sum weights must be finite");
    }
    let n_params = parts[0].n_params();
    if parts.iter().any(|p| p.n_params() != n_params) {
        return invalid("cost sum parts read different parameter counts");
    }
    Ok(CostSum { n_params, parts: weights.into_iter().zip(parts).collect() })
}

impl<S> Cost<S> for CostSum<S> {
    fn n_params(&self) -> usize {
        self.n_params
    }

    fn value(&self, x: &S, theta: &[f64], t: usize) -> f64 {
        self.parts.iter().map(|(w, c)| w * c.value(x, theta, t)).sum()
    }

    fn grad(&self, x: &S, theta: &[f64], t: usize) -> DVector<f64> {
        let mut g = DVector::zeros(self.n_params);
        for (w, c) in &self.parts {
            g.axpy(*w, &c.grad(x, theta, t), 1.0);
        }
        g
    }

    fn hessian(&self, x: &S, theta: &[f64], t: usize) -> Option<DMatrix<f64>> {
        let mut h = DMatrix::zeros(self.n_params, self.n_params);
        for (w, c) in &self.parts {
            h += c.hessian(x, theta, t)? * *w;
        }
        Some(h)
    }
}

/// `KL(P(·|x,θ) ‖ p̄(·|x))` for a tabular chain against a fixed baseline.
pub struct KlToFixedCost {
    chain: Arc<dyn TabularChain>,
    baseline: Arc<FixedChain>,
}

/// KL cost to a fixed chain. Fails when some chain row puts support where the
/// baseline has none (the divergence would be infinite).
pub fn cost_kl_to_fixed(
    chain: Arc<dyn TabularChain>,
    baseline: Arc<FixedChain>,
) -> Result<KlToFixedCost> {
    if chain.n_states() != baseline.n_states() {
        return invalid("chain and baseline have different state counts");
    }
    let theta = vec![0.0; chain.n_params()];
    for x in 0..chain.n_states() {
        let row = chain.row(x, &theta, 0);
        for s in &row.successors {
            if baseline.prob(x, *s) <= 0.0 {
                return Err(DsoError::DivergenceUndefined(format!(
                    "chain moves {x} -> {s} where the baseline has no mass"
                )));
            }
        }
    }
    Ok(KlToFixedCost { chain, baseline })
}

impl KlToFixedCost {
    fn log_ratios(&self, x: usize, successors: &[usize], probs: &[f64]) -> Vec<f64> {
        successors
            .iter()
            .zip(probs)
            .map(|(s, p)| if *p > 0.0 { (p / self.baseline.prob(x, *s)).ln() } else { 0.0 })
            .collect()
    }
}

impl Cost<usize> for KlToFixedCost {
    fn n_params(&self) -> usize {
        self.chain.n_params()
    }

    fn value(&self, x: &usize, theta: &[f64], t: usize) -> f64 {
        let row = self.chain.row(*x, theta, t);
        let lr = self.log_ratios(*x, &row.successors, &row.probs);
        row.probs.iter().zip(&lr).map(|(p, l)| p * l).sum()
    }

    fn grad(&self, x: &usize, theta: &[f64], t: usize) -> DVector<f64> {
        // Σ P ∇ln P vanishes, leaving Σ ∇P ln(P/p̄)
        let row = self.chain.row(*x, theta, t);
        let lr = self.log_ratios(*x, &row.successors, &row.probs);
        let dp = self.chain.row_prob_grad(*x, theta, t);
        dp.transpose() * DVector::from_vec(lr)
    }

    fn hessian(&self, x: &usize, theta: &[f64], t: usize) -> Option<DMatrix<f64>> {
        let hs = self.chain.row_score_hessians(*x, theta, t)?;
        let row = self.chain.row(*x, theta, t);
        let lr = self.log_ratios(*x, &row.successors, &row.probs);
        let n = self.n_params();
        let mut h = DMatrix::zeros(n, n);
        for k in 0..row.successors.len() {
            let s = row.scores.row(k).transpose();
            let outer = &s * s.transpose();
            // ∇²P ln(P/p̄) + ∇P ∇ln Pᵀ with ∇²P = P (s sᵀ + ∇² ln P)
            h += (&outer * (1.0 + lr[k]) + &hs[k] * lr[k]) * row.probs[k];
        }
        Some(h)
    }
}

/// A state-conditional stochastic policy over a finite action set.
pub trait TabularPolicy: Send + Sync {
    fn n_states(&self) -> usize;
    fn n_actions(&self) -> usize;
    fn n_params(&self) -> usize;
    fn probs(&self, x: usize, theta: &[f64]) -> Vec<f64>;
    /// `n_actions × n_θ`; row `a` is `∇θ ln π(a|x,θ)`.
    fn scores(&self, x: usize, theta: &[f64]) -> DMatrix<f64>;
    /// `∇²θ ln π(a|x,θ)` per action.
    fn score_hessians(&self, _x: usize, _theta: &[f64]) -> Option<Vec<DMatrix<f64>>> {
        None
    }
}

/// Entropy `H[π(·|x,θ)]` of a tabular policy, with `0 ln 0 = 0`.
pub struct PolicyEntropyCost {
    policy: Arc<dyn TabularPolicy>,
}

pub fn cost_policy_entropy(policy: Arc<dyn TabularPolicy>) -> PolicyEntropyCost {
    PolicyEntropyCost { policy }
}

fn xlnx(p: f64) -> f64 {
    if p > 0.0 {
        p * p.ln()
    } else {
        0.0
    }
}

impl Cost<usize> for PolicyEntropyCost {
    fn n_params(&self) -> usize {
        self.policy.n_params()
    }

    fn value(&self, x: &usize, theta: &[f64], _t: usize) -> f64 {
        -self.policy.probs(*x, theta).into_iter().map(xlnx).sum::<f64>()
    }

    fn grad(&self, x: &usize, theta: &[f64], _t: usize) -> DVector<f64> {
        // -Σ ∇π (ln π + 1) = -Σ π ln π ∇ln π since Σ ∇π = 0
        let pi = self.policy.probs(*x, theta);
        let scores = self.policy.scores(*x, theta);
        let w = DVector::from_iterator(pi.len(), pi.iter().map(|&p| -xlnx(p)));
        scores.transpose() * w
    }

    fn hessian(&self, x: &usize, theta: &[f64], _t: usize) -> Option<DMatrix<f64>> {
        let hs = self.policy.score_hessians(*x, theta)?;
        let pi = self.policy.probs(*x, theta);
        let scores = self.policy.scores(*x, theta);
        let n = self.n_params();
        let mut h = DMatrix::zeros(n, n);
        for (a, &p) in pi.iter().enumerate() {
            if p <= 0.0 {
                continue;
            }
            let s = scores.row(a).transpose();
            let outer = &s * s.transpose();
            // -∇²(π ln π) = -[(ln π + 1) ∇²π + π s sᵀ], ∇²π = π (s sᵀ + ∇² ln π)
            h -= (&outer * (p.ln() + 2.0) + &hs[a] * (p.ln() + 1.0)) * p;
        }
        Some(h)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::make_softmax_chain;

    fn quad(n: usize) -> QuadraticCost {
        let terms = (0..n)
            .map(|x| {
                let mut q = QuadraticTerm::constant(x as f64, 2);
                q.linear = DVector::from_vec(vec![1.0, -(x as f64)]);
                q.quadratic = DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]);
                q
            })
            .collect();
        QuadraticCost::new(2, vec![terms]).unwrap()
    }

    #[test]
    fn single_part_sum_is_identity() {
        let c: Arc<dyn Cost<usize>> = Arc::new(quad(3));
        let s = cost_sum(vec![c.clone()], vec![1.0]).unwrap();
        let th = [0.3, -0.7];
        assert_eq!(s.value(&2, &th, 0), c.value(&2, &th, 0));
        assert_eq!(s.grad(&2, &th, 0), c.grad(&2, &th, 0));
    }

    #[test]
    fn opposite_weights_cancel() {
        let c: Arc<dyn Cost<usize>> = Arc::new(quad(3));
        let s = cost_sum(vec![c.clone(), c], vec![1.0, -1.0]).unwrap();
        for x in 0..3 {
            assert_eq!(s.value(&x, &[1.5, 2.0], 0), 0.0);
            assert_eq!(s.grad(&x, &[1.5, 2.0], 0).amax(), 0.0);
        }
    }

    #[test]
    fn mismatched_parameter_counts_are_rejected() {
        let a: Arc<dyn Cost<usize>> = Arc::new(TableCost::new(vec![0.0], 2));
        let b: Arc<dyn Cost<usize>> = Arc::new(TableCost::new(vec![0.0], 3));
        assert!(cost_sum(vec![a, b], vec![1.0, 1.0]).is_err());
    }

    #[test]
    fn kl_outside_baseline_support_is_rejected() {
        let chain = Arc::new(make_softmax_chain(2, &[vec![0, 1], vec![0, 1]], &[]).unwrap());
        let baseline =
            Arc::new(FixedChain::new(vec![vec![0], vec![0, 1]], vec![vec![1.0], vec![0.5, 0.5]], vec![], 4).unwrap());
        let err = cost_kl_to_fixed(chain, baseline).err().unwrap();
        assert!(matches!(err, DsoError::DivergenceUndefined(_)));
    }

    #[test]
    fn kl_is_zero_at_the_baseline() {
        let chain = Arc::new(make_softmax_chain(2, &[vec![0, 1], vec![0, 1]], &[]).unwrap());
        let baseline = Arc::new(
            FixedChain::new(vec![vec![0, 1], vec![0, 1]], vec![vec![0.5, 0.5], vec![0.5, 0.5]], vec![], 4)
                .unwrap(),
        );
        let kl = cost_kl_to_fixed(chain, baseline).unwrap();
        assert!(kl.value(&0, &[0.0; 4], 0).abs() < 1e-15);
        assert!(kl.grad(&0, &[0.0; 4], 0).amax() < 1e-15);
        assert!(kl.value(&1, &[0.0, 0.0, 2.0, -1.0], 0) > 0.0);
    }
}
