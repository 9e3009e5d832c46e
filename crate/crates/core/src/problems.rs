//! Problem library: the canonical two-state exit problem and seeded random
//! instances.
//!
//! Every generator derives independent random streams from one seed:
//! stream `k` of `ChaCha8Rng::seed_from_u64(seed)` drives component `k`
//! (chain, cost, parameters, obstacles, ...). Changing how one component is
//! drawn therefore never shifts the draws of another.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{invalid, Result};
use crate::mdp::{LmdpSpec, TabularMdp};
use crate::model::{
    make_gaussian_chain, make_softmax_chain, DsoProblem, FixedChain, GaussianChain, GaussianControlCost,
    InitialDistribution, LinearPolicy, LogLinearChain, LogLinearRow, QuadraticCost, QuadraticTerm, Setting,
    TableCost, TabularProblem,
};

/// Stream indices used for seed splitting.
pub mod stream {
    pub const CHAIN: u64 = 1;
    pub const COST: u64 = 2;
    pub const THETA: u64 = 3;
    pub const OBSTACLES: u64 = 4;
    pub const DYNAMICS: u64 = 5;
    pub const POLICY: u64 = 6;
}

/// Independent generator for one component of a seeded instance.
pub fn component_rng(seed: u64, component: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(component);
    rng
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// State 0 (cost 1) either stays or exits to the absorbing state 1 (cost 0),
/// with softmax logits `θ = (θ_stay, θ_exit)`. `J = 1/σ` with σ the exit
/// probability, so the infimum is 1.
pub fn canonical_two_state() -> TabularProblem {
    let chain = Arc::new(make_softmax_chain(2, &[vec![0, 1], vec![1]], &[1]).expect("valid chain"));
    let cost = Arc::new(TableCost::new(vec![1.0, 0.0], 2));
    TabularProblem::new(chain, cost, Setting::FirstExit, InitialDistribution::point(2, 0)).expect("valid problem")
}

/// Options for [`random_tabular`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RandomTabular {
    pub n_states: usize,
    pub setting: Setting,
    pub seed: u64,
    /// Successors per state beyond the structural ones.
    pub extra_successors: usize,
    /// Multiplier on the chain features; small values make P nearly θ-independent.
    pub chain_scale: f64,
    /// Diagonal curvature of the quadratic cost in θ.
    pub cost_curvature: f64,
}

impl RandomTabular {
    pub fn new(n_states: usize, setting: Setting, seed: u64) -> Self {
        Self { n_states, setting, seed, extra_successors: 2, chain_scale: 1.0, cost_curvature: 0.2 }
    }
}

/// Random log-linear chain with one parameter per edge and a cost quadratic
/// in θ.
///
/// Structure guarantees the solvers' preconditions: first-exit chains always
/// allow `x → x+1` towards the terminal state `n-1`; average-cost chains hold
/// a self-loop and `x → x+1 mod n` (irreducible and aperiodic). Time-varying
/// chains reuse the edge parameters with slice-dependent feature weights.
pub fn random_tabular(opts: &RandomTabular) -> Result<TabularProblem> {
    let n = opts.n_states;
    if n < 2 {
        return invalid("random problems need at least two states");
    }
    let mut chain_rng = component_rng(opts.seed, stream::CHAIN);
    let terminals: Vec<usize> = if opts.setting == Setting::FirstExit { vec![n - 1] } else { vec![] };
    let mut supports: Vec<Vec<usize>> = Vec::with_capacity(n);
    for x in 0..n {
        if terminals.contains(&x) {
            supports.push(vec![x]);
            continue;
        }
        let mut s = match opts.setting {
            Setting::FirstExit => vec![x + 1],
            Setting::Average => vec![x, (x + 1) % n],
            _ => vec![chain_rng.random_range(0..n)],
        };
        for _ in 0..opts.extra_successors {
            let y = chain_rng.random_range(0..n);
            if !s.contains(&y) {
                s.push(y);
            }
        }
        s.sort_unstable();
        supports.push(s);
    }
    let n_params: usize = (0..n).filter(|x| !terminals.contains(x)).map(|x| supports[x].len()).sum();
    let slices = match opts.setting {
        Setting::TimeVarying { horizon } => horizon.max(1),
        _ => 1,
    };
    let mut rows_by_slice = Vec::with_capacity(slices);
    for _ in 0..slices {
        let mut offset = 0;
        let mut rows = Vec::with_capacity(n);
        for x in 0..n {
            if terminals.contains(&x) {
                rows.push(None);
                continue;
            }
            let m = supports[x].len();
            let mut features = DMatrix::zeros(m, n_params);
            for k in 0..m {
                let weight = if slices > 1 { chain_rng.random_range(0.5..1.5) } else { 1.0 };
                features[(k, offset + k)] = opts.chain_scale * weight;
            }
            let offsets = (0..m).map(|_| 0.5 * normal(&mut chain_rng)).collect();
            rows.push(Some(LogLinearRow { successors: supports[x].clone(), features, offsets }));
            offset += m;
        }
        rows_by_slice.push(rows);
    }
    let chain = Arc::new(LogLinearChain::new(n, n_params, terminals.clone(), rows_by_slice)?);

    let mut cost_rng = component_rng(opts.seed, stream::COST);
    let cost_slices = match opts.setting {
        Setting::TimeVarying { horizon } => horizon + 1,
        _ => 1,
    };
    let mut terms = Vec::with_capacity(cost_slices);
    for _ in 0..cost_slices {
        let row = (0..n)
            .map(|x| {
                if terminals.contains(&x) {
                    return QuadraticTerm::constant(0.0, n_params);
                }
                let v = DVector::from_fn(n_params, |_, _| normal(&mut cost_rng));
                let diag = DVector::from_fn(n_params, |_, _| opts.cost_curvature * cost_rng.random_range(0.5..1.5));
                let quadratic = DMatrix::from_diagonal(&diag) + &v * v.transpose() * (0.02 * opts.cost_curvature);
                QuadraticTerm {
                    constant: cost_rng.random_range(0.0..1.0),
                    linear: DVector::from_fn(n_params, |_, _| 0.1 * normal(&mut cost_rng)),
                    quadratic,
                }
            })
            .collect();
        terms.push(row);
    }
    let cost = Arc::new(QuadraticCost::new(n_params, terms)?);
    let p0 = match opts.setting {
        Setting::FirstExit => InitialDistribution::point(n, 0),
        _ => InitialDistribution::uniform(n),
    };
    TabularProblem::new(chain, cost, opts.setting, p0)
}

/// Parameters drawn from `N(0, scale²)` on the θ stream of `seed`.
pub fn random_theta(n_params: usize, seed: u64, scale: f64) -> Vec<f64> {
    let mut rng = component_rng(seed, stream::THETA);
    (0..n_params).map(|_| scale * normal(&mut rng)).collect()
}

fn random_row(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let w: Vec<f64> = (0..n).map(|_| rng.random_range(0.05..1.0)).collect();
    let total: f64 = w.iter().sum();
    w.iter().map(|v| v / total).collect()
}

/// Dense random MDP; with `first_exit`, state `n-1` is an absorbing terminal.
pub fn random_smdp(n_states: usize, n_actions: usize, first_exit: bool, seed: u64) -> Result<TabularMdp> {
    let mut rng = component_rng(seed, stream::DYNAMICS);
    let terminal = first_exit.then_some(n_states - 1);
    let p = (0..n_states)
        .map(|x| {
            (0..n_actions)
                .map(|_| {
                    if Some(x) == terminal {
                        (0..n_states).map(|y| f64::from(u8::from(y == x))).collect()
                    } else {
                        random_row(&mut rng, n_states)
                    }
                })
                .collect()
        })
        .collect();
    let mut cost_rng = component_rng(seed, stream::COST);
    let r = (0..n_states)
        .map(|x| {
            (0..n_actions)
                .map(|_| if Some(x) == terminal { 0.0 } else { cost_rng.random_range(0.0..1.0) })
                .collect()
        })
        .collect();
    TabularMdp::new(p, r, terminal.into_iter().collect())
}

/// Dense random baseline chain with state costs in `[0, 1)`.
pub fn random_lmdp(n_states: usize, first_exit: bool, seed: u64) -> Result<LmdpSpec> {
    let mut rng = component_rng(seed, stream::DYNAMICS);
    let terminal = first_exit.then_some(n_states - 1);
    let mut m = DMatrix::zeros(n_states, n_states);
    for x in 0..n_states {
        if Some(x) == terminal {
            m[(x, x)] = 1.0;
        } else {
            for (y, p) in random_row(&mut rng, n_states).into_iter().enumerate() {
                m[(x, y)] = p;
            }
        }
    }
    let baseline = Arc::new(FixedChain::from_dense(&m, terminal.into_iter().collect(), 0)?);
    let mut cost_rng = component_rng(seed, stream::COST);
    let r = (0..n_states).map(|x| if Some(x) == terminal { 0.0 } else { cost_rng.random_range(0.0..1.0) }).collect();
    LmdpSpec::new(baseline, r)
}

/// Gridworld with a passive random walk as the baseline chain.
#[derive(Debug, Clone)]
pub struct Gridworld {
    pub spec: LmdpSpec,
    pub width: usize,
    pub height: usize,
    pub obstacles: Vec<usize>,
    /// Uniform over nonterminal cells; Z-learning episodes restart from it.
    pub p0: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridworldOptions {
    pub width: usize,
    pub height: usize,
    pub n_obstacles: usize,
    pub step_cost: f64,
    pub obstacle_cost: f64,
    pub seed: u64,
}

impl Default for GridworldOptions {
    fn default() -> Self {
        Self { width: 5, height: 5, n_obstacles: 3, step_cost: 0.1, obstacle_cost: 0.5, seed: 0 }
    }
}

/// Cells are `row * width + col`; the goal is the last cell (terminal).
/// The baseline moves to each of {stay, up, down, left, right} with
/// probability 1/5, where moves off the grid stay put. Obstacles are costly
/// cells drawn from the obstacle stream, never the start cell 0 or the goal.
pub fn gridworld_lmdp(opts: &GridworldOptions) -> Result<Gridworld> {
    let (w, h) = (opts.width, opts.height);
    let n = w * h;
    if n < 2 {
        return invalid("gridworld needs at least two cells");
    }
    if opts.n_obstacles + 2 > n {
        return invalid("too many obstacles for the grid");
    }
    let goal = n - 1;
    let mut m = DMatrix::zeros(n, n);
    for cell in 0..n {
        if cell == goal {
            m[(cell, cell)] = 1.0;
            continue;
        }
        let (r, c) = (cell / w, cell % w);
        let moves = [(0i64, 0i64), (-1, 0), (1, 0), (0, -1), (0, 1)];
        for (dr, dc) in moves {
            let (nr, nc) = (r as i64 + dr, c as i64 + dc);
            let target = if nr < 0 || nc < 0 || nr >= h as i64 || nc >= w as i64 {
                cell
            } else {
                nr as usize * w + nc as usize
            };
            m[(cell, target)] += 0.2;
        }
    }
    let mut rng = component_rng(opts.seed, stream::OBSTACLES);
    let mut obstacles = Vec::with_capacity(opts.n_obstacles);
    while obstacles.len() < opts.n_obstacles {
        let cell = rng.random_range(1..goal);
        if !obstacles.contains(&cell) {
            obstacles.push(cell);
        }
    }
    obstacles.sort_unstable();
    let r = (0..n)
        .map(|x| {
            if x == goal {
                0.0
            } else if obstacles.contains(&x) {
                opts.obstacle_cost
            } else {
                opts.step_cost
            }
        })
        .collect();
    let baseline = Arc::new(FixedChain::from_dense(&m, vec![goal], 0)?);
    let spec = LmdpSpec::new(baseline, r)?;
    let p0 = (0..n).map(|x| if x == goal { 0.0 } else { 1.0 / (n - 1) as f64 }).collect();
    Ok(Gridworld { spec, width: w, height: h, obstacles, p0 })
}

pub type GaussianProblem = DsoProblem<DVector<f64>, GaussianChain>;

/// Linear-Gaussian regulator `x' = A x + B(Kx + k) + w`, `w ~ N(0, 0.1 I)`,
/// with `A` scaled to operator norm 0.8, cost `xᵀx + 0.1 uᵀu` and
/// `x_0 ~ N(0, I)`.
pub fn gaussian_linear(state_dim: usize, action_dim: usize, gamma: f64, seed: u64) -> Result<GaussianProblem> {
    let mut rng = component_rng(seed, stream::DYNAMICS);
    let mut a = DMatrix::from_fn(state_dim, state_dim, |_, _| normal(&mut rng));
    let norm = a.clone().svd(false, false).singular_values.max();
    if norm > 0.0 {
        a *= 0.8 / norm;
    }
    let b = DMatrix::from_fn(state_dim, action_dim, |_, _| normal(&mut rng) / (state_dim as f64).sqrt());
    let policy = LinearPolicy::new(state_dim, action_dim);
    let chain = Arc::new(make_gaussian_chain(a, b, DMatrix::identity(state_dim, state_dim) * 0.1, policy)?);
    let cost = Arc::new(GaussianControlCost::new(
        DMatrix::identity(state_dim, state_dim),
        DMatrix::identity(action_dim, action_dim) * 0.1,
        policy,
    )?);
    let p0 = InitialDistribution::gaussian(DVector::zeros(state_dim), DMatrix::identity(state_dim, state_dim))?;
    DsoProblem::gaussian(chain, cost, Setting::EpisodicDiscounted { gamma }, p0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::exact::objective;

    #[test]
    fn canonical_objective_is_inverse_exit_probability() {
        let pr = canonical_two_state();
        let j = objective(&pr, &[0.0, (3.0f64).ln()]).unwrap();
        // σ = 3/4
        assert!((j - 4.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn random_instances_satisfy_solver_preconditions() {
        for setting in [
            Setting::EpisodicDiscounted { gamma: 0.9 },
            Setting::FirstExit,
            Setting::Average,
            Setting::TimeVarying { horizon: 10 },
        ] {
            for seed in 0..5 {
                let pr = random_tabular(&RandomTabular::new(12, setting, seed)).unwrap();
                let theta = random_theta(pr.n_params(), seed, 0.5);
                assert!(objective(&pr, &theta).unwrap().is_finite(), "{setting:?} seed {seed}");
            }
        }
    }

    #[test]
    fn seeds_are_reproducible_and_distinct() {
        let a = random_smdp(4, 2, true, 3).unwrap();
        let b = random_smdp(4, 2, true, 3).unwrap();
        let c = random_smdp(4, 2, true, 4).unwrap();
        assert_eq!(a.transitions(), b.transitions());
        assert_ne!(a.transitions(), c.transitions());
    }

    #[test]
    fn gridworld_baseline_is_stochastic() {
        let g = gridworld_lmdp(&GridworldOptions::default()).unwrap();
        let m = g.spec.baseline.to_dense();
        for x in 0..25 {
            assert!((m.row(x).sum() - 1.0).abs() < 1e-12);
        }
        assert_eq!(g.obstacles.len(), 3);
    }
}
