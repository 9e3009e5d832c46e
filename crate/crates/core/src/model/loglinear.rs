use nalgebra::{DMatrix, DVector};

use super::{softmax, TabularChain, TabularRow, NORMALIZATION_TOL};
use crate::error::{invalid, Result};

/// Logits `b(x,x') + φ(x,x')ᵀθ` for the allowed successors of one state.
#[derive(Debug, Clone)]
pub struct LogLinearRow {
    pub successors: Vec<usize>,
    /// `successors.len() × n_θ`
    pub features: DMatrix<f64>,
    pub offsets: Vec<f64>,
}

/// Tabular chain whose rows are softmaxes of linear logits.
///
/// Row-softmax over an explicit support is the canonical smooth
/// parameterization: θ is unconstrained, the score identity holds exactly and
/// second derivatives are available in closed form. A time-varying chain keeps
/// one slice of rows per time index; indices past the last slice reuse it.
#[derive(Debug, Clone)]
pub struct LogLinearChain {
    n_states: usize,
    n_params: usize,
    terminals: Vec<usize>,
    slices: Vec<Vec<Option<LogLinearRow>>>,
}

/// Softmax chain with one logit parameter per (state, allowed successor).
///
/// Parameters are laid out state by state, following each successor list in
/// order. Terminal states become absorbing self-loops and own no parameters.
pub fn make_softmax_chain(
    n_states: usize,
    support: &[Vec<usize>],
    terminals: &[usize],
) -> Result<LogLinearChain> {
    LogLinearChain::softmax(n_states, support, terminals)
}

impl LogLinearChain {
    pub fn softmax(n_states: usize, support: &[Vec<usize>], terminals: &[usize]) -> Result<Self> {
        if support.len() != n_states {
            return invalid(format!("support lists {} states, expected {n_states}", support.len()));
        }
        let n_params: usize = (0..n_states)
            .filter(|x| !terminals.contains(x))
            .map(|x| support[x].len())
            .sum();
        let mut next = 0;
        let mut rows = Vec::with_capacity(n_states);
        for x in 0..n_states {
            if terminals.contains(&x) {
                rows.push(None);
                continue;
            }
            let succ = &support[x];
            let mut features = DMatrix::zeros(succ.len(), n_params);
            for k in 0..succ.len() {
                features[(k, next + k)] = 1.0;
            }
            next += succ.len();
            rows.push(Some(LogLinearRow {
                successors: succ.clone(),
                features,
                offsets: vec![0.0; succ.len()],
            }));
        }
        Self::new(n_states, n_params, terminals.to_vec(), vec![rows])
    }

    /// General constructor; `slices[t][x]` is `None` exactly for terminal states.
    pub fn new(
        n_states: usize,
        n_params: usize,
        terminals: Vec<usize>,
        slices: Vec<Vec<Option<LogLinearRow>>>,
    ) -> Result<Self> {
        if slices.is_empty() {
            return invalid("chain needs at least one time slice");
        }
        if let Some(&x) = terminals.iter().find(|&&x| x >= n_states) {
            return invalid(format!("terminal state {x} out of range"));
        }
        for (t, rows) in slices.iter().enumerate() {
            if rows.len() != n_states {
                return invalid(format!("slice {t} has {} rows, expected {n_states}", rows.len()));
            }
            for (x, row) in rows.iter().enumerate() {
                match (terminals.contains(&x), row) {
                    (true, None) => {}
                    (true, Some(_)) => return invalid(format!("terminal state {x} has a row")),
                    (false, None) => {
                        return invalid(format!("nonterminal state {x} has an empty successor list"))
                    }
                    (false, Some(r)) => {
                        if r.successors.is_empty() {
                            return invalid(format!(
                                "nonterminal state {x} has an empty successor list"
                            ));
                        }
                        if r.successors.iter().any(|&s| s >= n_states) {
                            return invalid(format!("state {x} has an out-of-range successor"));
                        }
                        let mut sorted = r.successors.clone();
                        sorted.sort_unstable();
                        sorted.dedup();
                        if sorted.len() != r.successors.len() {
                            return invalid(format!("state {x} lists a successor twice"));
                        }
                        if r.features.nrows() != r.successors.len()
                            || r.features.ncols() != n_params
                            || r.offsets.len() != r.successors.len()
                        {
                            return invalid(format!("state {x} has mis-shaped features"));
                        }
                    }
                }
            }
        }
        Ok(Self { n_states, n_params, terminals, slices })
    }

    /// Re-embeds the chain into a larger parameter vector starting at `offset`.
    pub fn embed(mut self, n_params: usize, offset: usize) -> Result<Self> {
        if offset + self.n_params > n_params {
            return invalid("embedding does not fit the target parameter vector");
        }
        for rows in &mut self.slices {
            for row in rows.iter_mut().flatten() {
                let mut f = DMatrix::zeros(row.successors.len(), n_params);
                f.view_mut((0, offset), (row.successors.len(), self.n_params))
                    .copy_from(&row.features);
                row.features = f;
            }
        }
        self.n_params = n_params;
        Ok(self)
    }

    pub fn horizon_slices(&self) -> usize {
        self.slices.len()
    }

    fn spec(&self, x: usize, t: usize) -> Option<&LogLinearRow> {
        let slice = &self.slices[t.min(self.slices.len() - 1)];
        slice[x].as_ref()
    }

    fn probs(&self, spec: &LogLinearRow, theta: &[f64]) -> Vec<f64> {
        let th = DVector::from_column_slice(theta);
        let lin = &spec.features * th;
        let logits: Vec<f64> = spec.offsets.iter().zip(lin.iter()).map(|(b, l)| b + l).collect();
        softmax(&logits)
    }

    fn terminal_row(&self, x: usize) -> TabularRow {
        TabularRow { successors: vec![x], probs: vec![1.0], scores: DMatrix::zeros(1, self.n_params) }
    }
}

impl TabularChain for LogLinearChain {
    fn n_states(&self) -> usize {
        self.n_states
    }

    fn n_params(&self) -> usize {
        self.n_params
    }

    fn terminals(&self) -> &[usize] {
        &self.terminals
    }

    fn row(&self, x: usize, theta: &[f64], t: usize) -> TabularRow {
        let Some(spec) = self.spec(x, t) else {
            return self.terminal_row(x);
        };
        let probs = self.probs(spec, theta);
        let p = DVector::from_column_slice(&probs);
        let mean_feature = spec.features.transpose() * &p;
        let mut scores = spec.features.clone();
        for mut r in scores.row_iter_mut() {
            r -= mean_feature.transpose();
        }
        TabularRow { successors: spec.successors.clone(), probs, scores }
    }

    fn row_prob_grad(&self, x: usize, theta: &[f64], t: usize) -> DMatrix<f64> {
        let Some(spec) = self.spec(x, t) else {
            return DMatrix::zeros(1, self.n_params);
        };
        // softmax Jacobian (diag(p) - p pᵀ) applied to the feature matrix
        let p = DVector::from_column_slice(&self.probs(spec, theta));
        let jac = DMatrix::from_diagonal(&p) - &p * p.transpose();
        jac * &spec.features
    }

    fn row_score_hessians(&self, x: usize, theta: &[f64], t: usize) -> Option<Vec<DMatrix<f64>>> {
        let Some(spec) = self.spec(x, t) else {
            return Some(vec![DMatrix::zeros(self.n_params, self.n_params)]);
        };
        // ∇² ln P_k = -Cov_P(φ), identical for every successor
        let p = DVector::from_column_slice(&self.probs(spec, theta));
        let mean = spec.features.transpose() * &p;
        let second = spec.features.transpose() * DMatrix::from_diagonal(&p) * &spec.features;
        let h = -(second - &mean * mean.transpose());
        Some(vec![h; spec.successors.len()])
    }
}

/// θ-independent tabular chain given by explicit rows; every score is zero.
#[derive(Debug, Clone)]
pub struct FixedChain {
    n_params: usize,
    terminals: Vec<usize>,
    successors: Vec<Vec<usize>>,
    probs: Vec<Vec<f64>>,
}

impl FixedChain {
    /// Rows are sparse: `successors[x]` with matching `probs[x]`.
    pub fn new(
        successors: Vec<Vec<usize>>,
        probs: Vec<Vec<f64>>,
        terminals: Vec<usize>,
        n_params: usize,
    ) -> Result<Self> {
        let n = successors.len();
        if probs.len() != n {
            return invalid("successor and probability tables differ in length");
        }
        for x in 0..n {
            if successors[x].len() != probs[x].len() || successors[x].is_empty() {
                return invalid(format!("row {x} is empty or mis-shaped"));
            }
            if successors[x].iter().any(|&s| s >= n) {
                return invalid(format!("row {x} has an out-of-range successor"));
            }
            if probs[x].iter().any(|p| !(p.is_finite() && *p >= 0.0)) {
                return invalid(format!("row {x} has a negative or non-finite probability"));
            }
            let total: f64 = probs[x].iter().sum();
            if (total - 1.0).abs() > NORMALIZATION_TOL {
                return invalid(format!("row {x} sums to {total}"));
            }
        }
        for &x in &terminals {
            if x >= n || successors[x] != [x] {
                return invalid(format!("terminal state {x} is not an absorbing self-loop"));
            }
        }
        Ok(Self { n_params, terminals, successors, probs })
    }

    /// Builds sparse rows from a dense row-stochastic matrix, dropping zeros.
    pub fn from_dense(matrix: &DMatrix<f64>, terminals: Vec<usize>, n_params: usize) -> Result<Self> {
        let n = matrix.nrows();
        if matrix.ncols() != n {
            return invalid("transition matrix is not square");
        }
        let mut succ = Vec::with_capacity(n);
        let mut probs = Vec::with_capacity(n);
        for x in 0..n {
            let (s, p): (Vec<usize>, Vec<f64>) =
                (0..n).filter(|&y| matrix[(x, y)] > 0.0).map(|y| (y, matrix[(x, y)])).unzip();
            succ.push(s);
            probs.push(p);
        }
        Self::new(succ, probs, terminals, n_params)
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let n = self.successors.len();
        let mut m = DMatrix::zeros(n, n);
        for x in 0..n {
            for (s, p) in self.successors[x].iter().zip(&self.probs[x]) {
                m[(x, *s)] = *p;
            }
        }
        m
    }

    pub fn successors(&self, x: usize) -> &[usize] {
        &self.successors[x]
    }

    pub fn probs(&self, x: usize) -> &[f64] {
        &self.probs[x]
    }

    /// Probability of `next` from `x` (zero outside the support).
    pub fn prob(&self, x: usize, next: usize) -> f64 {
        self.successors[x].iter().position(|&s| s == next).map_or(0.0, |k| self.probs[x][k])
    }
}

impl TabularChain for FixedChain {
    fn n_states(&self) -> usize {
        self.successors.len()
    }

    fn n_params(&self) -> usize {
        self.n_params
    }

    fn terminals(&self) -> &[usize] {
        &self.terminals
    }

    fn row(&self, x: usize, _theta: &[f64], _t: usize) -> TabularRow {
        TabularRow {
            successors: self.successors[x].clone(),
            probs: self.probs[x].clone(),
            scores: DMatrix::zeros(self.successors[x].len(), self.n_params),
        }
    }

    fn row_score_hessians(&self, x: usize, _theta: &[f64], _t: usize) -> Option<Vec<DMatrix<f64>>> {
        Some(vec![DMatrix::zeros(self.n_params, self.n_params); self.successors[x].len()])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Chain;

    fn two_state() -> LogLinearChain {
        make_softmax_chain(2, &[vec![0, 1], vec![]], &[1]).unwrap()
    }

    #[test]
    fn equal_logits_give_uniform_row() {
        let row = two_state().row(0, &[0.0, 0.0], 0);
        assert_eq!(row.successors, vec![0, 1]);
        assert!((row.probs[1] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn exit_probability_increases_monotonically() {
        let chain = two_state();
        let mut last = 0.5;
        for t in [0.5, 1.0, 2.0, 5.0, 10.0, 40.0] {
            let p = chain.row(0, &[0.0, t], 0).probs[1];
            assert!(p > last);
            last = p;
        }
        assert!(1.0 - last < 1e-15);
    }

    #[test]
    fn score_at_uniform_point() {
        let chain = two_state();
        let s = Chain::score(&chain, &0, &1, &[0.0, 0.0], 0);
        assert!((s[0] + 0.5).abs() < 1e-15 && (s[1] - 0.5).abs() < 1e-15);
        // finite-difference check of d/dθ ln P(1|0)
        let h = 1e-6;
        let lp = |a: f64, b: f64| Chain::log_prob(&chain, &0, &1, &[a, b], 0);
        let fd0 = (lp(h, 0.0) - lp(-h, 0.0)) / (2.0 * h);
        let fd1 = (lp(0.0, h) - lp(0.0, -h)) / (2.0 * h);
        assert!((fd0 + 0.5).abs() < 1e-9 && (fd1 - 0.5).abs() < 1e-9);
    }

    #[test]
    fn terminal_rows_are_fixed_self_loops() {
        let row = two_state().row(1, &[3.0, -1.0], 0);
        assert_eq!(row.successors, vec![1]);
        assert_eq!(row.probs, vec![1.0]);
        assert_eq!(row.scores.amax(), 0.0);
    }

    #[test]
    fn empty_support_for_nonterminal_is_rejected() {
        let err = make_softmax_chain(2, &[vec![], vec![0]], &[]).unwrap_err();
        assert!(matches!(err, crate::DsoError::InvalidStructure(_)));
    }

    #[test]
    fn jacobian_and_score_routes_agree() {
        let chain = make_softmax_chain(3, &[vec![0, 1, 2], vec![0, 2], vec![]], &[2]).unwrap();
        let theta = [0.3, -1.2, 0.7, 2.0, -0.4];
        for x in 0..2 {
            let a = chain.row_prob_grad(x, &theta, 0);
            let b = chain.row(x, &theta, 0).prob_grad_from_scores();
            assert!((a - b).amax() < 1e-15);
        }
    }

    #[test]
    fn fixed_chain_rejects_unnormalized_rows() {
        let err = FixedChain::new(vec![vec![0, 1]], vec![vec![0.5, 0.4]], vec![], 0);
        assert!(err.is_err());
    }
}
