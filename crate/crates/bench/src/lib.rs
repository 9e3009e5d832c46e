//! Fixed instances shared by the benchmarks, so every run times the same work.

use dso_core::problems::{random_tabular, random_theta, RandomTabular};
use dso_core::{Setting, TabularProblem};

/// A random first-exit problem and a parameter point on it.
pub fn first_exit_instance(n_states: usize) -> (TabularProblem, Vec<f64>) {
    let problem = random_tabular(&RandomTabular::new(n_states, Setting::FirstExit, 7)).expect("valid instance");
    let theta = random_theta(problem.n_params(), 7, 0.5);
    (problem, theta)
}
