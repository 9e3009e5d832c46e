//! Exact linear-algebra evaluation of tabular problems: value functions,
//! occupancy and stationary densities, objectives and gradients.

use nalgebra::{DMatrix, DVector};

use crate::error::{invalid, DsoError, Result};
use crate::model::{Setting, TabularChain, TabularProblem};

/// Largest state count solved directly; larger chains use power iteration.
pub const DIRECT_SOLVE_MAX: usize = 200;

const POWER_TOL: f64 = 1e-13;
const POWER_MAX_ITERS: usize = 200_000;
const ERGODICITY_TOL: f64 = 1e-10;

/// State values of an episodic or average-cost problem.
#[derive(Debug, Clone, PartialEq)]
pub struct ValueTable {
    pub setting: Setting,
    pub values: DVector<f64>,
}

/// Finite-horizon values `V_0 .. V_T`.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeValueTable {
    pub values: Vec<DVector<f64>>,
}

/// Average cost per step and the differential value, normalized so `E_d[V] = 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct AverageCostPair {
    pub j: f64,
    pub values: DVector<f64>,
    pub stationary: DVector<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DensityKind {
    /// `ρ(x) = Σ_{t≥0} γ^t Pr(x_t = x)`.
    DiscountedOccupancy,
    Stationary,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DensityTable {
    pub kind: DensityKind,
    pub weights: DVector<f64>,
}

/// Which derivative of the transition rows the gradient is assembled from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GradientForm {
    /// `∇θP` directly.
    Direct,
    /// `P ∇θ ln P`, the expectation form.
    Score,
}

/// Dense `n × n` transition matrix at time `t`.
pub fn transition_matrix(chain: &dyn TabularChain, theta: &[f64], t: usize) -> DMatrix<f64> {
    let n = chain.n_states();
    let mut p = DMatrix::zeros(n, n);
    for x in 0..n {
        let row = chain.row(x, theta, t);
        for (s, q) in row.successors.iter().zip(&row.probs) {
            p[(x, *s)] += q;
        }
    }
    p
}

pub fn cost_vector(problem: &TabularProblem, theta: &[f64], t: usize) -> DVector<f64> {
    DVector::from_fn(problem.n_states(), |x, _| problem.cost.value(&x, theta, t))
}

fn check_params(problem: &TabularProblem, theta: &[f64]) -> Result<()> {
    if theta.len() != problem.n_params() {
        return Err(DsoError::Dimension(format!(
            "θ has length {}, problem has {} parameters",
            theta.len(),
            problem.n_params()
        )));
    }
    Ok(())
}

fn nonterminals(problem: &TabularProblem) -> Vec<usize> {
    (0..problem.n_states()).filter(|x| !problem.chain.is_terminal_state(*x)).collect()
}

/// Every state reaches a terminal state with positive probability.
pub(crate) fn check_reaches_terminals(p: &DMatrix<f64>, terminals: &[usize]) -> Result<()> {
    let n = p.nrows();
    let mut reaches = vec![false; n];
    for &x in terminals {
        reaches[x] = true;
    }
    loop {
        let mut changed = false;
        for x in 0..n {
            if !reaches[x] && (0..n).any(|y| reaches[y] && p[(x, y)] > 0.0) {
                reaches[x] = true;
                changed = true;
            }
        }
        if !changed {
            break;
        }
    }
    match reaches.iter().position(|r| !r) {
        Some(x) => Err(DsoError::Reachability(format!("state {x} never reaches a terminal state"))),
        None => Ok(()),
    }
}

fn solve(a: DMatrix<f64>, b: &DVector<f64>, what: &str) -> Result<DVector<f64>> {
    a.lu().solve(b).ok_or_else(|| DsoError::Solve(format!("{what}: singular system")))
}

pub fn solve_value_episodic(problem: &TabularProblem, theta: &[f64]) -> Result<ValueTable> {
    check_params(problem, theta)?;
    let p = transition_matrix(problem.chain.as_ref(), theta, 0);
    let l = cost_vector(problem, theta, 0);
    let n = problem.n_states();
    let values = match problem.setting {
        Setting::EpisodicDiscounted { gamma } => {
            solve(DMatrix::identity(n, n) - p * gamma, &l, "discounted value")?
        }
        Setting::FirstExit => {
            check_reaches_terminals(&p, problem.chain.terminals())?;
            let free = nonterminals(problem);
            let k = free.len();
            let a = DMatrix::from_fn(k, k, |i, j| f64::from(u8::from(i == j)) - p[(free[i], free[j])]);
            let b = DVector::from_fn(k, |i, _| l[free[i]]);
            let v = solve(a, &b, "first-exit value")
                .map_err(|_| DsoError::Reachability("first-exit system is singular".into()))?;
            let mut values = DVector::zeros(n);
            for (i, &x) in free.iter().enumerate() {
                values[x] = v[i];
            }
            values
        }
        s => return invalid(format!("episodic solve called with setting {s:?}")),
    };
    Ok(ValueTable { setting: problem.setting, values })
}

pub fn solve_value_average(problem: &TabularProblem, theta: &[f64]) -> Result<AverageCostPair> {
    check_params(problem, theta)?;
    if problem.setting != Setting::Average {
        return invalid("average solve needs the average setting");
    }
    let p = transition_matrix(problem.chain.as_ref(), theta, 0);
    let l = cost_vector(problem, theta, 0);
    let (j, values, stationary) = average_value_of_matrix(&p, &l)?;
    Ok(AverageCostPair { j, values, stationary })
}

/// `(J, V, d)` for a dense ergodic chain with cost vector `l`.
pub fn average_value_of_matrix(
    p: &DMatrix<f64>,
    l: &DVector<f64>,
) -> Result<(f64, DVector<f64>, DVector<f64>)> {
    let d = stationary_of_matrix(p)?;
    let n = p.nrows();
    let j = d.dot(l);
    // (I - P + 1dᵀ)V = L - J1 forces dᵀV = 0
    let a = DMatrix::identity(n, n) - p + DMatrix::from_element(n, 1, 1.0) * d.transpose();
    let v = solve(a, &l.add_scalar(-j), "differential value")?;
    Ok((j, v, d))
}

pub fn solve_value_timevarying(problem: &TabularProblem, theta: &[f64]) -> Result<TimeValueTable> {
    check_params(problem, theta)?;
    let Setting::TimeVarying { horizon } = problem.setting else {
        return invalid("time-varying solve needs the time-varying setting");
    };
    let mut values = vec![cost_vector(problem, theta, horizon)];
    for t in (0..horizon).rev() {
        let p = transition_matrix(problem.chain.as_ref(), theta, t);
        let next = &p * values.last().expect("nonempty");
        values.push(cost_vector(problem, theta, t) + next);
    }
    values.reverse();
    Ok(TimeValueTable { values })
}

pub fn discounted_occupancy(problem: &TabularProblem, theta: &[f64]) -> Result<DensityTable> {
    check_params(problem, theta)?;
    let p = transition_matrix(problem.chain.as_ref(), theta, 0);
    let p0 = DVector::from_column_slice(problem.p0_weights());
    let n = problem.n_states();
    let weights = match problem.setting {
        Setting::EpisodicDiscounted { gamma } => {
            solve(DMatrix::identity(n, n) - p.transpose() * gamma, &p0, "occupancy")?
        }
        Setting::FirstExit => {
            check_reaches_terminals(&p, problem.chain.terminals())?;
            let free = nonterminals(problem);
            let k = free.len();
            let a = DMatrix::from_fn(k, k, |i, j| f64::from(u8::from(i == j)) - p[(free[j], free[i])]);
            let b = DVector::from_fn(k, |i, _| p0[free[i]]);
            let rho_free = solve(a, &b, "first-exit occupancy")?;
            // terminal states collect the entering mass once and do not propagate it
            let mut rho = p0.clone();
            for (i, &x) in free.iter().enumerate() {
                rho[x] = rho_free[i];
            }
            for &term in problem.chain.terminals() {
                rho[term] = p0[term] + free.iter().enumerate().map(|(i, &x)| rho_free[i] * p[(x, term)]).sum::<f64>();
            }
            rho
        }
        s => return invalid(format!("occupancy needs an episodic setting, got {s:?}")),
    };
    Ok(DensityTable { kind: DensityKind::DiscountedOccupancy, weights })
}

pub fn stationary_density(problem: &TabularProblem, theta: &[f64]) -> Result<DensityTable> {
    check_params(problem, theta)?;
    let p = transition_matrix(problem.chain.as_ref(), theta, 0);
    Ok(DensityTable { kind: DensityKind::Stationary, weights: stationary_of_matrix(&p)? })
}

fn power_iterate(p: &DMatrix<f64>, start: DVector<f64>) -> Option<DVector<f64>> {
    let pt = p.transpose();
    let mut d = start;
    for _ in 0..POWER_MAX_ITERS {
        let next = &pt * &d;
        let delta = (&next - &d).amax();
        d = next;
        if delta < POWER_TOL {
            return Some(d);
        }
    }
    None
}

/// Stationary distribution of an ergodic dense chain.
///
/// Fails unless the distribution is unique with full support and power
/// iteration from two different starts converges to it.
pub fn stationary_of_matrix(p: &DMatrix<f64>) -> Result<DVector<f64>> {
    let n = p.nrows();
    let uniform = DVector::from_element(n, 1.0 / n as f64);
    let mut point = DVector::zeros(n);
    point[0] = 1.0;
    let a = power_iterate(p, uniform)
        .ok_or_else(|| DsoError::Ergodicity("power iteration did not converge".into()))?;
    let b = power_iterate(p, point)
        .ok_or_else(|| DsoError::Ergodicity("power iteration did not converge (periodic chain?)".into()))?;
    if (&a - &b).amax() > ERGODICITY_TOL {
        return Err(DsoError::Ergodicity("stationary distribution is not unique".into()));
    }
    let d = if n <= DIRECT_SOLVE_MAX {
        let mut m = DMatrix::identity(n, n) - p.transpose();
        m.row_mut(n - 1).fill(1.0);
        let mut rhs = DVector::zeros(n);
        rhs[n - 1] = 1.0;
        solve(m, &rhs, "stationary distribution")
            .map_err(|_| DsoError::Ergodicity("stationary distribution is not unique".into()))?
    } else {
        let s = a.sum();
        a / s
    };
    if let Some(x) = d.iter().position(|&w| !(w > 1e-14)) {
        return Err(DsoError::Ergodicity(format!("state {x} has no stationary mass")));
    }
    Ok(d)
}

/// State distributions `q_0 .. q_T` of a time-varying chain.
pub fn forward_densities(problem: &TabularProblem, theta: &[f64], horizon: usize) -> Vec<DVector<f64>> {
    let mut q = vec![DVector::from_column_slice(problem.p0_weights())];
    for t in 0..horizon {
        let p = transition_matrix(problem.chain.as_ref(), theta, t);
        let next = p.transpose() * q.last().expect("nonempty");
        q.push(next);
    }
    q
}

pub fn objective(problem: &TabularProblem, theta: &[f64]) -> Result<f64> {
    let p0 = DVector::from_column_slice(problem.p0_weights());
    match problem.setting {
        Setting::EpisodicDiscounted { .. } | Setting::FirstExit => {
            Ok(p0.dot(&solve_value_episodic(problem, theta)?.values))
        }
        Setting::Average => Ok(solve_value_average(problem, theta)?.j),
        Setting::TimeVarying { .. } => Ok(p0.dot(&solve_value_timevarying(problem, theta)?.values[0])),
    }
}

/// Weighting density and values frozen at θ: `(ρ, V)` for episodic problems,
/// `(d, V)` for average-cost problems.
pub fn density_and_values(problem: &TabularProblem, theta: &[f64]) -> Result<(DVector<f64>, DVector<f64>)> {
    match problem.setting {
        Setting::EpisodicDiscounted { .. } | Setting::FirstExit => Ok((
            discounted_occupancy(problem, theta)?.weights,
            solve_value_episodic(problem, theta)?.values,
        )),
        Setting::Average => {
            let pair = solve_value_average(problem, theta)?;
            Ok((pair.stationary, pair.values))
        }
        Setting::TimeVarying { .. } => invalid("time-varying problems have no stationary weighting"),
    }
}

/// `∇θP(·|x,θ)` row block in the requested form.
pub fn row_gradient(
    chain: &dyn TabularChain,
    x: usize,
    theta: &[f64],
    t: usize,
    form: GradientForm,
) -> (Vec<usize>, DMatrix<f64>) {
    match form {
        GradientForm::Direct => {
            let row = chain.row(x, theta, t);
            (row.successors, chain.row_prob_grad(x, theta, t))
        }
        GradientForm::Score => {
            let row = chain.row(x, theta, t);
            let g = row.prob_grad_from_scores();
            (row.successors, g)
        }
    }
}

/// `Σ_x w(x) [∇L(x) + γ Σ_{x'} ∇P(x'|x) (V(x') - b(x))]` for a time-invariant
/// problem, with `b` an optional state baseline. Terminal states are skipped
/// in the first-exit setting.
pub fn assemble_gradient(
    problem: &TabularProblem,
    theta: &[f64],
    density: &DVector<f64>,
    values: &DVector<f64>,
    baseline: Option<&[f64]>,
    form: GradientForm,
) -> DVector<f64> {
    let gamma = problem.gamma();
    let skip_terminals = problem.setting == Setting::FirstExit;
    let mut g = DVector::zeros(problem.n_params());
    for x in 0..problem.n_states() {
        if density[x] == 0.0 || (skip_terminals && problem.chain.is_terminal_state(x)) {
            continue;
        }
        let b = baseline.map_or(0.0, |b| b[x]);
        let (succ, dp) = row_gradient(problem.chain.as_ref(), x, theta, 0, form);
        let shifted = DVector::from_iterator(succ.len(), succ.iter().map(|&s| values[s] - b));
        let term = problem.cost.grad(&x, theta, 0) + dp.transpose() * shifted * gamma;
        g.axpy(density[x], &term, 1.0);
    }
    g
}

pub fn exact_gradient(problem: &TabularProblem, theta: &[f64]) -> Result<DVector<f64>> {
    exact_gradient_with(problem, theta, GradientForm::Direct)
}

pub fn exact_gradient_with(
    problem: &TabularProblem,
    theta: &[f64],
    form: GradientForm,
) -> Result<DVector<f64>> {
    check_params(problem, theta)?;
    if let Setting::TimeVarying { horizon } = problem.setting {
        let v = solve_value_timevarying(problem, theta)?;
        let q = forward_densities(problem, theta, horizon);
        let mut g = DVector::zeros(problem.n_params());
        for t in 0..=horizon {
            for x in 0..problem.n_states() {
                if q[t][x] == 0.0 {
                    continue;
                }
                let mut term = problem.cost.grad(&x, theta, t);
                if t < horizon {
                    let (succ, dp) = row_gradient(problem.chain.as_ref(), x, theta, t, form);
                    let next = DVector::from_iterator(succ.len(), succ.iter().map(|&s| v.values[t + 1][s]));
                    term += dp.transpose() * next;
                }
                g.axpy(q[t][x], &term, 1.0);
            }
        }
        return Ok(g);
    }
    let (density, values) = density_and_values(problem, theta)?;
    Ok(assemble_gradient(problem, theta, &density, &values, None, form))
}

/// Gradient through the bottleneck: `Σ_x w(x) ∇θμ (∇ηL̃ + γ Σ ∇ηP̃ V)`.
///
/// The problem's cost must be the bottleneck's cost.
pub fn exact_gradient_bottleneck(problem: &TabularProblem, theta: &[f64]) -> Result<DVector<f64>> {
    check_params(problem, theta)?;
    let b = problem
        .chain
        .bottleneck()
        .ok_or_else(|| DsoError::Capability("chain has no bottleneck structure".into()))?;
    for x in 0..problem.n_states() {
        if b.terminals().contains(&x) {
            continue;
        }
        let eta = b.mu(x, theta);
        if (b.cost(x, &eta) - problem.cost.value(&x, theta, 0)).abs() > 1e-12 {
            return Err(DsoError::Capability(format!("cost at state {x} is not the bottleneck cost")));
        }
    }
    let (density, values) = density_and_values(problem, theta)?;
    let gamma = problem.gamma();
    let mut g = DVector::zeros(problem.n_params());
    for x in 0..problem.n_states() {
        if density[x] == 0.0 || b.terminals().contains(&x) {
            continue;
        }
        let eta = b.mu(x, theta);
        let v = DVector::from_iterator(b.successors(x).len(), b.successors(x).iter().map(|&s| values[s]));
        let q_grad = b.cost_grad(x, &eta) + b.kernel_grad(x, &eta).transpose() * v * gamma;
        g.axpy(density[x], &(b.mu_jacobian(x, theta) * q_grad), 1.0);
    }
    Ok(g)
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use super::*;
    use crate::model::{make_softmax_chain, FixedChain, InitialDistribution, TableCost};

    fn canonical(setting: Setting) -> TabularProblem {
        let chain = Arc::new(make_softmax_chain(2, &[vec![0, 1], vec![1]], &[1]).unwrap());
        let cost = Arc::new(TableCost::new(vec![1.0, 0.0], 2));
        TabularProblem::new(chain, cost, setting, InitialDistribution::point(2, 0)).unwrap()
    }

    fn two_state(p: f64, q: f64, l: [f64; 2], setting: Setting) -> TabularProblem {
        let m = DMatrix::from_row_slice(2, 2, &[1.0 - p, p, q, 1.0 - q]);
        let chain = Arc::new(FixedChain::from_dense(&m, vec![], 0).unwrap());
        let cost = Arc::new(TableCost::new(l.to_vec(), 0));
        TabularProblem::new(chain, cost, setting, InitialDistribution::uniform(2)).unwrap()
    }

    #[test]
    fn first_exit_value_is_inverse_exit_probability() {
        let pr = canonical(Setting::FirstExit);
        let v = solve_value_episodic(&pr, &[0.0, 0.0]).unwrap();
        assert!((v.values[0] - 2.0).abs() < 1e-12);
        assert_eq!(v.values[1], 0.0);
        assert!((objective(&pr, &[0.0, 0.0]).unwrap() - 2.0).abs() < 1e-12);
    }

    #[test]
    fn absorbing_discounted_state_sums_geometrically() {
        let m = DMatrix::from_element(1, 1, 1.0);
        let chain = Arc::new(FixedChain::from_dense(&m, vec![], 0).unwrap());
        let cost = Arc::new(TableCost::new(vec![3.0], 0));
        let pr = TabularProblem::new(
            chain,
            cost,
            Setting::EpisodicDiscounted { gamma: 0.9 },
            InitialDistribution::point(1, 0),
        )
        .unwrap();
        assert!((solve_value_episodic(&pr, &[]).unwrap().values[0] - 30.0).abs() < 1e-10);
        assert!((discounted_occupancy(&pr, &[]).unwrap().weights[0] - 10.0).abs() < 1e-10);
    }

    #[test]
    fn first_exit_occupancy_counts_expected_visits() {
        let pr = canonical(Setting::FirstExit);
        let rho = discounted_occupancy(&pr, &[0.0, 0.0]).unwrap().weights;
        assert!((rho[0] - 2.0).abs() < 1e-12);
        assert!((rho[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn average_two_state_closed_form() {
        let (p, q) = (0.3, 0.6);
        let pr = two_state(p, q, [2.0, -1.0], Setting::Average);
        let pair = solve_value_average(&pr, &[]).unwrap();
        assert!((pair.j - (q * 2.0 - p) / (p + q)).abs() < 1e-12);
        assert!((pair.stationary[0] - q / (p + q)).abs() < 1e-12);
        assert!(pair.stationary.dot(&pair.values).abs() < 1e-12);
    }

    #[test]
    fn periodic_chain_is_rejected() {
        let pr = two_state(1.0, 1.0, [0.0, 1.0], Setting::Average);
        assert!(matches!(solve_value_average(&pr, &[]), Err(DsoError::Ergodicity(_))));
    }

    #[test]
    fn reducible_chain_is_rejected() {
        let pr = two_state(0.5, 0.0, [0.0, 1.0], Setting::Average);
        assert!(matches!(solve_value_average(&pr, &[]), Err(DsoError::Ergodicity(_))));
    }

    #[test]
    fn unreachable_terminal_is_reported() {
        let chain = Arc::new(make_softmax_chain(3, &[vec![0, 1], vec![0, 1], vec![2]], &[2]).unwrap());
        let cost = Arc::new(TableCost::new(vec![1.0, 1.0, 0.0], 4));
        let pr = TabularProblem::new(chain, cost, Setting::FirstExit, InitialDistribution::point(3, 0)).unwrap();
        assert!(matches!(solve_value_episodic(&pr, &[0.0; 4]), Err(DsoError::Reachability(_))));
    }

    #[test]
    fn canonical_gradient_at_uniform_point() {
        let pr = canonical(Setting::FirstExit);
        for form in [GradientForm::Direct, GradientForm::Score] {
            let g = exact_gradient_with(&pr, &[0.0, 0.0], form).unwrap();
            assert!((g[0] - 1.0).abs() < 1e-12 && (g[1] + 1.0).abs() < 1e-12, "{g}");
        }
    }

    #[test]
    fn horizon_zero_value_is_the_final_cost() {
        let chain = Arc::new(make_softmax_chain(2, &[vec![0, 1], vec![0, 1]], &[]).unwrap());
        let cost = Arc::new(TableCost::new(vec![1.5, -2.0], 4));
        let pr = TabularProblem::new(
            chain,
            cost,
            Setting::TimeVarying { horizon: 0 },
            InitialDistribution::uniform(2),
        )
        .unwrap();
        let v = solve_value_timevarying(&pr, &[0.3; 4]).unwrap();
        assert_eq!(v.values.len(), 1);
        assert_eq!(v.values[0].as_slice(), &[1.5, -2.0]);
    }
}
