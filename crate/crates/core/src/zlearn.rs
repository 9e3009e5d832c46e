//! Linearly-solvable problems: the desirability `Z = exp(-V)`, its exact
//! solves, the chains it induces, and off-chain stochastic approximation of
//! the fixed point `Z = exp(-r) G[Z^γ]` with `G[f](x) = Σ_y p̄(y|x) f(y)`.

use std::fmt::Write as _;
use std::sync::Arc;

use log::warn;
use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, DsoError, Result};
use crate::exact::{check_reaches_terminals, density_and_values, exact_gradient, objective};
use crate::mdp::{map_lmdp, LmdpSpec};
use crate::model::{
    sample_categorical, FixedChain, InitialDistribution, LogLinearChain, LogLinearRow, Setting, TableCost,
    TabularChain, TabularProblem,
};
use crate::surrogate::fisher_exact;

/// Floor applied to learned Z values.
pub const Z_FLOOR: f64 = 1e-12;

/// Power iteration budget for the average-cost eigenproblem.
pub const MAX_POWER_ITERATIONS: usize = 100_000;

/// `G[f](x) = Σ_y p̄(y|x) f(y)`.
pub fn apply_g(baseline: &FixedChain, f: &[f64]) -> Vec<f64> {
    (0..baseline.n_states())
        .map(|x| baseline.successors(x).iter().zip(baseline.probs(x)).map(|(y, p)| p * f[*y]).sum())
        .collect()
}

fn pow_gamma(z: &[f64], gamma: f64) -> Vec<f64> {
    z.iter().map(|v| v.powf(gamma)).collect()
}

/// A desirability function, stored in Z-space for tabular tables or as
/// energies `E(x) = θᵀφ(x)` for linear features.
#[derive(Debug, Clone, PartialEq)]
pub enum ZFunction {
    Tabular { z: Vec<f64> },
    Linear { features: DMatrix<f64>, theta: DVector<f64> },
}

impl ZFunction {
    pub fn from_energies(energies: &[f64]) -> Self {
        Self::Tabular { z: energies.iter().map(|e| (-e).exp()).collect() }
    }

    pub fn n_states(&self) -> usize {
        match self {
            Self::Tabular { z } => z.len(),
            Self::Linear { features, .. } => features.nrows(),
        }
    }

    pub fn z(&self, x: usize) -> f64 {
        match self {
            Self::Tabular { z } => z[x],
            Self::Linear { features, theta } => (-features.row(x).dot(&theta.transpose())).exp(),
        }
    }

    pub fn values(&self) -> Vec<f64> {
        (0..self.n_states()).map(|x| self.z(x)).collect()
    }

    /// `E(x) = -ln Z(x)`, the value function of the optimal chain.
    pub fn energies(&self) -> Vec<f64> {
        self.values().iter().map(|z| -z.ln()).collect()
    }

    /// Largest `|Z - Z_ref| / Z_ref`.
    pub fn max_relative_error(&self, reference: &[f64]) -> f64 {
        self.values().iter().zip(reference).map(|(z, r)| (z - r).abs() / r).fold(0.0, f64::max)
    }
}

/// Largest `|Z - exp(-r) G[Z^γ]| / Z`.
pub fn bellman_residual(spec: &LmdpSpec, z: &[f64], gamma: f64) -> f64 {
    let g = apply_g(&spec.baseline, &pow_gamma(z, gamma));
    (0..spec.n_states())
        .filter(|x| !spec.terminals.contains(x))
        .map(|x| (z[x] - (-spec.r[x]).exp() * g[x]).abs() / z[x])
        .fold(0.0, f64::max)
}

/// Exact first-exit solve of the linear system `Z = exp(-r) P̄ Z` on the
/// nonterminal states with `Z = 1` at terminals.
pub fn solve_z_firstexit(spec: &LmdpSpec) -> Result<ZFunction> {
    if spec.terminals.is_empty() {
        return invalid("first-exit problems need terminal states");
    }
    let p = spec.baseline.to_dense();
    check_reaches_terminals(&p, &spec.terminals)?;
    let n = spec.n_states();
    let free: Vec<usize> = (0..n).filter(|x| !spec.terminals.contains(x)).collect();
    let k = free.len();
    let a = DMatrix::from_fn(k, k, |i, j| {
        f64::from(u8::from(i == j)) - (-spec.r[free[i]]).exp() * p[(free[i], free[j])]
    });
    let b = DVector::from_fn(k, |i, _| {
        (-spec.r[free[i]]).exp() * spec.terminals.iter().map(|&t| p[(free[i], t)]).sum::<f64>()
    });
    let zf = a
        .lu()
        .solve(&b)
        .ok_or_else(|| DsoError::Reachability("desirability system is singular".into()))?;
    let mut z = vec![1.0; n];
    for (i, &x) in free.iter().enumerate() {
        z[x] = zf[i];
    }
    if z.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
        return Err(DsoError::Solve("desirability solve produced a non-positive value".into()));
    }
    Ok(ZFunction::Tabular { z })
}

/// Discounted fixed point by iterating the γ-contraction
/// `V ← r - ln G[exp(-γV)]` in value space.
pub fn solve_z_discounted(spec: &LmdpSpec, gamma: f64) -> Result<ZFunction> {
    if !(0.0..1.0).contains(&gamma) {
        return invalid("discounted desirability needs 0 ≤ γ < 1");
    }
    let n = spec.n_states();
    let mut v = vec![0.0; n];
    for _ in 0..MAX_POWER_ITERATIONS {
        let shifted: Vec<f64> = v.iter().map(|e| (-gamma * e).exp()).collect();
        let g = apply_g(&spec.baseline, &shifted);
        let next: Vec<f64> = (0..n).map(|x| spec.r[x] - g[x].ln()).collect();
        let change = next.iter().zip(&v).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        v = next;
        if change <= 1e-15 * (1.0 + v.iter().fold(0.0f64, |m, e| m.max(e.abs()))) {
            return Ok(ZFunction::from_energies(&v));
        }
    }
    Err(DsoError::Spectral(MAX_POWER_ITERATIONS))
}

/// Principal eigenpair of `f ↦ exp(-r) G[f]`, normalized to `‖Z‖∞ = 1`;
/// returns Z and `J = -ln λ`.
pub fn solve_z_average(spec: &LmdpSpec) -> Result<(ZFunction, f64)> {
    if !spec.terminals.is_empty() {
        return invalid("average-cost desirability needs a chain without terminals");
    }
    let n = spec.n_states();
    let q: Vec<f64> = spec.r.iter().map(|r| (-r).exp()).collect();
    let mut z = vec![1.0; n];
    let mut lambda = 1.0;
    for _ in 0..MAX_POWER_ITERATIONS {
        let g = apply_g(&spec.baseline, &z);
        let mut next: Vec<f64> = (0..n).map(|x| q[x] * g[x]).collect();
        lambda = next.iter().fold(0.0f64, |m, v| m.max(*v));
        if !(lambda > 0.0 && lambda.is_finite()) {
            return Err(DsoError::Ergodicity("eigenvalue iteration collapsed".into()));
        }
        next.iter_mut().for_each(|v| *v /= lambda);
        let change = next.iter().zip(&z).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        z = next;
        if change < 1e-14 {
            break;
        }
    }
    let g = apply_g(&spec.baseline, &z);
    let residual = (0..n).map(|x| (q[x] * g[x] - lambda * z[x]).abs()).fold(0.0, f64::max);
    if residual > 1e-10 || z.iter().any(|v| *v <= 0.0) {
        return Err(DsoError::Spectral(MAX_POWER_ITERATIONS));
    }
    Ok((ZFunction::Tabular { z }, -lambda.ln()))
}

/// The log-linear chain `P(x'|x,θ) ∝ p̄(x'|x) exp(-γ θᵀφ(x'))`, i.e.
/// `p̄ Z^γ / G[Z^γ]` with `Z = exp(-θᵀφ)`. Parameters are feature weights.
pub struct ZChain {
    pub chain: Arc<LogLinearChain>,
    pub features: DMatrix<f64>,
    pub gamma: f64,
}

impl ZChain {
    /// `features` is `n_states × k`; row `x` is `φ(x)`.
    pub fn new(spec: &LmdpSpec, features: DMatrix<f64>, gamma: f64) -> Result<Self> {
        let n = spec.n_states();
        if features.nrows() != n {
            return Err(DsoError::Dimension(format!("{} feature rows for {n} states", features.nrows())));
        }
        let k = features.ncols();
        let rows = (0..n)
            .map(|x| {
                if spec.terminals.contains(&x) {
                    return None;
                }
                let (succ, probs): (Vec<usize>, Vec<f64>) = spec
                    .baseline
                    .successors(x)
                    .iter()
                    .zip(spec.baseline.probs(x))
                    .filter(|(_, p)| **p > 0.0)
                    .map(|(s, p)| (*s, *p))
                    .unzip();
                let feats = DMatrix::from_fn(succ.len(), k, |i, j| -gamma * features[(succ[i], j)]);
                Some(LogLinearRow { successors: succ, features: feats, offsets: probs.iter().map(|p| p.ln()).collect() })
            })
            .collect();
        let chain = LogLinearChain::new(n, k, spec.terminals.clone(), vec![rows])?;
        Ok(Self { chain: Arc::new(chain), features, gamma })
    }

    /// One-hot features: θ is the energy table.
    pub fn tabular(spec: &LmdpSpec, gamma: f64) -> Result<Self> {
        Self::new(spec, DMatrix::identity(spec.n_states(), spec.n_states()), gamma)
    }

    pub fn z_function(&self, theta: &[f64]) -> ZFunction {
        ZFunction::Linear { features: self.features.clone(), theta: DVector::from_column_slice(theta) }
    }

    pub fn transition_matrix(&self, theta: &[f64]) -> DMatrix<f64> {
        crate::exact::transition_matrix(self.chain.as_ref(), theta, 0)
    }
}

/// `P* = p̄ Z^γ / G[Z^γ]` as a tabular Z chain with θ = energies.
pub fn optimal_chain(spec: &LmdpSpec, z: &ZFunction, gamma: f64) -> Result<(ZChain, Vec<f64>)> {
    if z.values().iter().any(|v| !(*v > 0.0)) {
        return invalid("desirability must be positive");
    }
    Ok((ZChain::tabular(spec, gamma)?, z.energies()))
}

/// `r(x) - ln G[Z^γ](x) + γ E_{P*}[ln Z(x')]`, the state cost
/// `r + KL(P* ‖ p̄)` of the induced chain written through Z.
pub fn induced_cost(spec: &LmdpSpec, z: &[f64], gamma: f64) -> Vec<f64> {
    let zg = pow_gamma(z, gamma);
    let g = apply_g(&spec.baseline, &zg);
    (0..spec.n_states())
        .map(|x| {
            if spec.terminals.contains(&x) {
                return spec.r[x];
            }
            let expected_ln_z: f64 = spec
                .baseline
                .successors(x)
                .iter()
                .zip(spec.baseline.probs(x))
                .map(|(y, p)| p * zg[*y] / g[x] * z[*y].ln())
                .sum();
            spec.r[x] - g[x].ln() + gamma * expected_ln_z
        })
        .collect()
}

/// Objective of an arbitrary chain `P` under `r + KL(P ‖ p̄)`; chains that
/// leave the baseline support or never terminate give `+∞`.
pub fn lmdp_objective_of_matrix(spec: &LmdpSpec, p: &DMatrix<f64>, setting: Setting, p0: &[f64]) -> Result<f64> {
    let n = spec.n_states();
    let mut cost = spec.r.clone();
    for x in 0..n {
        if spec.terminals.contains(&x) {
            continue;
        }
        for y in 0..n {
            if p[(x, y)] > 0.0 {
                let base = spec.baseline.prob(x, y);
                if base == 0.0 {
                    return Ok(f64::INFINITY);
                }
                cost[x] += p[(x, y)] * (p[(x, y)] / base).ln();
            }
        }
    }
    let chain = Arc::new(FixedChain::from_dense(p, spec.terminals.clone(), 0)?);
    let problem = TabularProblem::new(chain, Arc::new(TableCost::new(cost, 0)), setting, InitialDistribution::tabular(p0.to_vec())?)?;
    match objective(&problem, &[]) {
        Ok(j) => Ok(j),
        Err(DsoError::Reachability(_)) | Err(DsoError::Ergodicity(_)) => Ok(f64::INFINITY),
        Err(e) => Err(e),
    }
}

/// How Z-learning picks the visited states and the update target.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ZLearnMode {
    /// States follow `p̄`; target `exp(-r(x_t)) Z(x_{t+1})^γ`.
    Baseline,
    /// States follow the induced chain; target `exp(-r(x_t)) G[Z^γ](x_t)`.
    GreedyExact,
    /// States follow the induced chain; target uses a fresh `x' ~ p̄(·|x_t)`.
    GreedyDoubleSample,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ZLearnConfig {
    pub mode: ZLearnMode,
    pub steps: usize,
    /// Step size `β = c / (c + visits(x))`.
    pub step_constant: f64,
    pub gamma: f64,
    pub seed: u64,
    /// Curve sampling period in steps (0 disables the curve).
    pub report_every: usize,
}

impl Default for ZLearnConfig {
    fn default() -> Self {
        Self { mode: ZLearnMode::GreedyExact, steps: 100_000, step_constant: 100.0, gamma: 1.0, seed: 0, report_every: 1000 }
    }
}

/// One sample of the Z-learning curve.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ZCurvePoint {
    pub step: usize,
    pub bellman_residual: f64,
    /// Against the reference, when one is given.
    pub max_relative_error: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ZLearnResult {
    pub z: ZFunction,
    pub curve: Vec<ZCurvePoint>,
    /// Updates that hit the positivity floor.
    pub floored: usize,
    pub episodes: usize,
}

impl ZLearnResult {
    /// First curve step at which the reference error drops below `tol` and
    /// stays there; `None` without a reference or if it never settles.
    pub fn steps_to(&self, tol: f64) -> Option<usize> {
        if self.curve.iter().any(|c| c.max_relative_error.is_none()) {
            return None;
        }
        let last_bad = self.curve.iter().rposition(|c| c.max_relative_error.is_some_and(|e| e >= tol));
        match last_bad {
            None => self.curve.first().map(|c| c.step),
            Some(i) => self.curve.get(i + 1).map(|c| c.step),
        }
    }

    pub fn final_error(&self) -> Option<f64> {
        self.curve.last().and_then(|c| c.max_relative_error)
    }
}

fn curve_point(spec: &LmdpSpec, z: &ZFunction, gamma: f64, step: usize, reference: Option<&[f64]>) -> ZCurvePoint {
    let values = z.values();
    ZCurvePoint {
        step,
        bellman_residual: bellman_residual(spec, &values, gamma),
        max_relative_error: reference.map(|r| z.max_relative_error(r)),
    }
}

fn sample_from(successors: &[usize], weights: &[f64], rng: &mut ChaCha8Rng) -> usize {
    successors[sample_categorical(weights, rng)]
}

/// Stochastic approximation of the desirability from sampled transitions.
///
/// Episodes restart from `p0` after reaching a terminal state. Tabular Z is
/// updated in Z-space, `Z(x) ← (1-β) Z(x) + β target`; linear Z takes a
/// gradient step on `½ (Z(x,θ) - target)²`. Terminal values stay fixed.
pub fn zlearn(
    spec: &LmdpSpec,
    init: ZFunction,
    p0: &[f64],
    config: &ZLearnConfig,
    reference: Option<&[f64]>,
) -> Result<ZLearnResult> {
    let n = spec.n_states();
    if init.n_states() != n || p0.len() != n {
        return Err(DsoError::Dimension("initial Z or p0 does not match the state count".into()));
    }
    if !(config.step_constant > 0.0) || !(0.0..=1.0).contains(&config.gamma) {
        return Err(DsoError::Config("Z-learning needs c > 0 and γ in [0, 1]".into()));
    }
    if spec.terminals.is_empty() && config.gamma >= 1.0 {
        return Err(DsoError::Capability("undiscounted Z-learning needs terminal states".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut z = init;
    let mut visits = vec![0usize; n];
    let mut floored = 0;
    let mut episodes = 0;
    let mut curve = Vec::new();
    let gamma = config.gamma;
    let restart = |rng: &mut ChaCha8Rng| sample_categorical(p0, rng);
    let mut x = restart(&mut rng);
    for step in 0..config.steps {
        if config.report_every > 0 && step % config.report_every == 0 {
            curve.push(curve_point(spec, &z, gamma, step, reference));
        }
        if spec.terminals.contains(&x) {
            episodes += 1;
            x = restart(&mut rng);
            continue;
        }
        let succ = spec.baseline.successors(x);
        let base = spec.baseline.probs(x);
        let zg: Vec<f64> = succ.iter().map(|&y| z.z(y).powf(gamma)).collect();
        let q = (-spec.r[x]).exp();
        let (next, target) = match config.mode {
            ZLearnMode::Baseline => {
                let k = sample_categorical(base, &mut rng);
                (succ[k], q * zg[k])
            }
            ZLearnMode::GreedyExact | ZLearnMode::GreedyDoubleSample => {
                let induced: Vec<f64> = base.iter().zip(&zg).map(|(p, w)| p * w).collect();
                let norm: f64 = induced.iter().sum();
                let next = sample_from(succ, &induced, &mut rng);
                let target = if config.mode == ZLearnMode::GreedyExact {
                    q * norm
                } else {
                    q * zg[sample_categorical(base, &mut rng)]
                };
                (next, target)
            }
        };
        let beta = config.step_constant / (config.step_constant + visits[x] as f64);
        visits[x] += 1;
        match &mut z {
            ZFunction::Tabular { z } => {
                let updated = (1.0 - beta) * z[x] + beta * target;
                z[x] = if updated < Z_FLOOR {
                    floored += 1;
                    Z_FLOOR
                } else {
                    updated
                };
            }
            ZFunction::Linear { features, theta } => {
                let phi = features.row(x).transpose();
                let current = (-phi.dot(theta)).exp();
                // ∂Z/∂θ = -Z φ
                theta.axpy(beta * (current - target) * current, &phi, 1.0);
                if (-phi.dot(theta)).exp() < Z_FLOOR {
                    floored += 1;
                }
            }
        }
        x = next;
    }
    curve.push(curve_point(spec, &z, gamma, config.steps, reference));
    if floored > 0 {
        warn!("{floored} Z-learning updates were floored at {Z_FLOOR}");
    }
    Ok(ZLearnResult { z, curve, floored, episodes })
}

/// Natural gradient against `θ - ω` for an average-cost Z chain, where ω fits
/// the differential values by `d`-weighted least squares on the same
/// features. Both sides are compared after projecting out the null space of
/// F (for one-hot features the constant direction, which leaves every chain
/// unchanged).
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CompatibleReport {
    pub natural_gradient: DVector<f64>,
    pub theta_minus_omega: DVector<f64>,
    pub max_abs_difference: f64,
    pub null_dimension: usize,
}

pub fn compatible_natural_gradient_check(spec: &LmdpSpec, features: DMatrix<f64>, theta: &[f64]) -> Result<CompatibleReport> {
    let n = spec.n_states();
    let zc = ZChain::new(spec, features.clone(), 1.0)?;
    let problem = map_lmdp(spec, zc.chain.clone(), Setting::Average, InitialDistribution::uniform(n))?;
    let grad = exact_gradient(&problem, theta)?;
    let fisher = fisher_exact(&problem, theta)?.matrix;
    let (density, values) = density_and_values(&problem, theta)?;

    let eig = fisher.clone().symmetric_eigen();
    let scale = eig.eigenvalues.amax().max(f64::MIN_POSITIVE);
    let k = theta.len();
    let mut pinv = DMatrix::zeros(k, k);
    let mut range = DMatrix::zeros(k, k);
    let mut null_dimension = 0;
    for (i, &l) in eig.eigenvalues.iter().enumerate() {
        let u = eig.eigenvectors.column(i);
        if l > 1e-10 * scale {
            pinv += u * u.transpose() / l;
            range += u * u.transpose();
        } else {
            null_dimension += 1;
        }
    }
    let natural = &range * (pinv * grad);

    let weighted = DMatrix::from_fn(n, k, |x, j| density[x] * features[(x, j)]);
    let gram = features.transpose() * &weighted;
    let rhs = weighted.transpose() * &values;
    let omega = gram
        .svd(true, true)
        .solve(&rhs, 1e-12)
        .map_err(|e| DsoError::Solve(format!("value fit: {e}")))?;
    let theta_minus_omega = &range * (DVector::from_column_slice(theta) - omega);
    let max_abs_difference = (&natural - &theta_minus_omega).amax();
    Ok(CompatibleReport { natural_gradient: natural, theta_minus_omega, max_abs_difference, null_dimension })
}

/// Plain-text key-value table of energies `E(x) = -ln Z(x)`.
pub fn write_z_table(z: &ZFunction, gamma: f64) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "gamma={gamma}");
    let _ = writeln!(out, "states={}", z.n_states());
    for (x, e) in z.energies().iter().enumerate() {
        let _ = writeln!(out, "energy.{x}={e}");
    }
    out
}

/// Parses [`write_z_table`] output into `(energies, γ)`.
pub fn read_z_table(text: &str) -> Result<(Vec<f64>, f64)> {
    let mut gamma = None;
    let mut states = None;
    let mut energies = Vec::new();
    for line in text.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#')) {
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| DsoError::Config(format!("line without '=': {line}")))?;
        let parse = |v: &str| v.trim().parse::<f64>().map_err(|e| DsoError::Config(format!("{key}: {e}")));
        match key.trim() {
            "gamma" => gamma = Some(parse(value)?),
            "states" => {
                states = Some(value.trim().parse::<usize>().map_err(|e| DsoError::Config(format!("states: {e}")))?)
            }
            k => {
                let idx: usize = k
                    .strip_prefix("energy.")
                    .and_then(|i| i.parse().ok())
                    .ok_or_else(|| DsoError::Config(format!("unknown key {k}")))?;
                if idx != energies.len() {
                    return Err(DsoError::Config(format!("energy.{idx} out of order")));
                }
                energies.push(parse(value)?);
            }
        }
    }
    let gamma = gamma.ok_or_else(|| DsoError::Config("missing gamma".into()))?;
    if states != Some(energies.len()) {
        return Err(DsoError::Config("state count does not match the energy entries".into()));
    }
    Ok((energies, gamma))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn chain_spec() -> LmdpSpec {
        // 0 → {0, 1, 2}, 1 → {0, 2}, 2 terminal
        let base = FixedChain::new(
            vec![vec![0, 1, 2], vec![0, 2], vec![2]],
            vec![vec![0.5, 0.3, 0.2], vec![0.6, 0.4], vec![1.0]],
            vec![2],
            0,
        )
        .unwrap();
        LmdpSpec::new(Arc::new(base), vec![0.7, 0.3, 0.0]).unwrap()
    }

    #[test]
    fn g_preserves_constants() {
        let spec = chain_spec();
        let g = apply_g(&spec.baseline, &[1.0; 3]);
        assert!(g.iter().all(|v| (v - 1.0).abs() < 1e-15));
    }

    #[test]
    fn first_exit_solve_has_small_residual() {
        let spec = chain_spec();
        let z = solve_z_firstexit(&spec).unwrap();
        assert!(bellman_residual(&spec, &z.values(), 1.0) < 1e-12);
    }

    #[test]
    fn single_transition_desirability() {
        let base = FixedChain::new(vec![vec![1], vec![1]], vec![vec![1.0], vec![1.0]], vec![1], 0).unwrap();
        let spec = LmdpSpec::new(Arc::new(base), vec![1.5, 0.0]).unwrap();
        let z = solve_z_firstexit(&spec).unwrap();
        assert!((z.z(0) - (-1.5f64).exp()).abs() < 1e-15);
    }

    #[test]
    fn induced_chain_value_is_minus_log_z() {
        let spec = chain_spec();
        let z = solve_z_firstexit(&spec).unwrap();
        let (zc, theta) = optimal_chain(&spec, &z, 1.0).unwrap();
        let p0 = vec![0.5, 0.5, 0.0];
        let problem = map_lmdp(&spec, zc.chain.clone(), Setting::FirstExit, InitialDistribution::tabular(p0.clone()).unwrap()).unwrap();
        let j = objective(&problem, &theta).unwrap();
        let expected: f64 = -p0.iter().zip(z.values()).map(|(p, v)| p * v.ln()).sum::<f64>();
        assert!((j - expected).abs() < 1e-10);
    }

    #[test]
    fn induced_cost_matches_kl_cost() {
        let spec = chain_spec();
        let z = solve_z_firstexit(&spec).unwrap();
        let (zc, theta) = optimal_chain(&spec, &z, 1.0).unwrap();
        let problem = map_lmdp(&spec, zc.chain.clone(), Setting::FirstExit, InitialDistribution::point(3, 0)).unwrap();
        let formula = induced_cost(&spec, &z.values(), 1.0);
        for x in 0..3 {
            assert!((problem.cost.value(&x, &theta, 0) - formula[x]).abs() < 1e-10);
        }
    }

    #[test]
    fn zero_cost_keeps_unit_desirability() {
        let base = chain_spec().baseline;
        let spec = LmdpSpec::new(base, vec![0.0; 3]).unwrap();
        let cfg = ZLearnConfig { mode: ZLearnMode::Baseline, steps: 2000, ..Default::default() };
        let res = zlearn(&spec, ZFunction::Tabular { z: vec![1.0; 3] }, &[1.0, 0.0, 0.0], &cfg, None).unwrap();
        assert!(res.z.values().iter().all(|v| (v - 1.0).abs() < 1e-15));
    }

    #[test]
    fn constant_cost_average_problem() {
        let base = FixedChain::from_dense(&DMatrix::from_row_slice(2, 2, &[0.3, 0.7, 0.6, 0.4]), vec![], 0).unwrap();
        let spec = LmdpSpec::new(Arc::new(base), vec![0.8, 0.8]).unwrap();
        let (z, j) = solve_z_average(&spec).unwrap();
        assert!((j - 0.8).abs() < 1e-12);
        assert!(z.values().iter().all(|v| (v - 1.0).abs() < 1e-12));
    }

    #[test]
    fn z_table_text_round_trips() {
        let z = ZFunction::from_energies(&[0.25, 1.0 / 3.0, 0.0]);
        let (e, g) = read_z_table(&write_z_table(&z, 0.9)).unwrap();
        assert_eq!(g, 0.9);
        assert_eq!(e, z.energies());
        assert!(read_z_table("gamma=1\nstates=1\nbogus=2\n").is_err());
    }
}
