//! Structural identities checked over randomly drawn instances.

use approx::assert_relative_eq;
use dso_core::exact::{
    cost_vector, density_and_values, discounted_occupancy, exact_gradient, exact_gradient_with, objective, GradientForm,
};
use dso_core::fd::{fd_gradient, fd_hessian, max_relative_error};
use dso_core::problems::{random_lmdp, random_tabular, random_theta, RandomTabular};
use dso_core::rollout::{algorithm1_gradient, generate_rollouts, rollout_gradient, Termination};
use dso_core::surrogate::{surrogate_exact, SurrogateObjective};
use dso_core::zlearn::apply_g;
use dso_core::Setting;
use proptest::prelude::*;

fn setting_strategy() -> impl Strategy<Value = Setting> {
    prop_oneof![
        (0.0..0.95f64).prop_map(|gamma| Setting::EpisodicDiscounted { gamma }),
        Just(Setting::FirstExit),
        Just(Setting::Average),
        (1usize..6).prop_map(|horizon| Setting::TimeVarying { horizon }),
    ]
}

fn stationary_strategy() -> impl Strategy<Value = Setting> {
    prop_oneof![
        (0.0..0.95f64).prop_map(|gamma| Setting::EpisodicDiscounted { gamma }),
        Just(Setting::FirstExit),
        Just(Setting::Average),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn gradient_matches_central_differences(n in 2usize..9, setting in setting_strategy(), seed in 0u64..10_000) {
        let problem = random_tabular(&RandomTabular::new(n, setting, seed)).unwrap();
        let theta = random_theta(problem.n_params(), seed, 0.8);
        let g = exact_gradient(&problem, &theta).unwrap();
        let fd = fd_gradient(&problem, &theta, 1e-5).unwrap();
        prop_assert!(max_relative_error(&g, &fd) < 1e-5);
    }

    #[test]
    fn direct_and_score_forms_agree(n in 2usize..9, setting in setting_strategy(), seed in 0u64..10_000) {
        let problem = random_tabular(&RandomTabular::new(n, setting, seed)).unwrap();
        let theta = random_theta(problem.n_params(), seed, 0.8);
        let direct = exact_gradient_with(&problem, &theta, GradientForm::Direct).unwrap();
        let score = exact_gradient_with(&problem, &theta, GradientForm::Score).unwrap();
        prop_assert!((direct - score).amax() < 1e-12);
    }

    /// `J = Σ_x w(x) L(x)` with the occupancy or stationary density.
    #[test]
    fn objective_is_density_weighted_cost(n in 2usize..9, setting in stationary_strategy(), seed in 0u64..10_000) {
        let problem = random_tabular(&RandomTabular::new(n, setting, seed)).unwrap();
        let theta = random_theta(problem.n_params(), seed, 0.8);
        let (density, _) = density_and_values(&problem, &theta).unwrap();
        let weighted = density.dot(&cost_vector(&problem, &theta, 0));
        assert_relative_eq!(weighted, objective(&problem, &theta).unwrap(), max_relative = 1e-10, epsilon = 1e-12);
    }

    /// Discounted occupancy has total mass `1/(1-γ)` without terminal states.
    #[test]
    fn discounted_occupancy_mass(n in 2usize..9, gamma in 0.0..0.95f64, seed in 0u64..10_000) {
        let problem = random_tabular(&RandomTabular::new(n, Setting::EpisodicDiscounted { gamma }, seed)).unwrap();
        let theta = random_theta(problem.n_params(), seed, 0.8);
        let rho = discounted_occupancy(&problem, &theta).unwrap().weights;
        assert_relative_eq!(rho.sum(), 1.0 / (1.0 - gamma), max_relative = 1e-12);
    }

    /// The frozen-density surrogate is tangent to J at α = 0.
    #[test]
    fn surrogate_is_tangent_at_zero(n in 2usize..8, setting in stationary_strategy(), seed in 0u64..10_000) {
        let problem = random_tabular(&RandomTabular::new(n, setting, seed)).unwrap();
        let theta = random_theta(problem.n_params(), seed, 0.8);
        let s = surrogate_exact(&problem, &theta).unwrap();
        let zero = vec![0.0; theta.len()];
        let h = s.hessian(&zero).unwrap();
        prop_assert!((&h - h.transpose()).amax() <= 1e-12 * h.amax().max(1.0));
        prop_assert!((s.gradient(&zero).unwrap() - exact_gradient(&problem, &theta).unwrap()).amax() < 1e-12);
    }

    #[test]
    fn baseline_operator_is_linear(n in 2usize..10, seed in 0u64..10_000, a in -3.0..3.0f64, b in -3.0..3.0f64) {
        let spec = random_lmdp(n, seed % 2 == 0, seed).unwrap();
        let f = random_theta(n, seed, 1.0);
        let g = random_theta(n, seed + 1, 1.0);
        let combined: Vec<f64> = f.iter().zip(&g).map(|(x, y)| a * x + b * y).collect();
        let lhs = apply_g(&spec.baseline, &combined);
        let gf = apply_g(&spec.baseline, &f);
        let gg = apply_g(&spec.baseline, &g);
        for x in 0..n {
            prop_assert!((lhs[x] - (a * gf[x] + b * gg[x])).abs() < 1e-12);
        }
    }

    /// Sampled returns obey `R_t = L_t + γ R_{t+1}` and the batch gradient is
    /// the plain mean of per-rollout gradients.
    #[test]
    fn rollout_returns_and_batch_mean(n in 2usize..7, first_exit in any::<bool>(), seed in 0u64..10_000) {
        let setting = if first_exit { Setting::FirstExit } else { Setting::EpisodicDiscounted { gamma: 0.8 } };
        let problem = random_tabular(&RandomTabular::new(n, setting, seed)).unwrap();
        let theta = random_theta(problem.n_params(), seed, 0.8);
        let term = Termination::for_setting(setting).unwrap();
        let batch = generate_rollouts(&problem, &theta, 16, term, seed, None).unwrap();
        let mut sum = nalgebra::DVector::zeros(problem.n_params());
        for r in &batch.rollouts {
            prop_assert!(r.return_residual(batch.discount) <= 1e-12 * r.returns[0].abs().max(1.0));
            sum += rollout_gradient(&problem, &theta, r, batch.discount, None);
        }
        let est = algorithm1_gradient(&problem, &theta, &batch, None).unwrap();
        prop_assert!((sum / batch.rollouts.len() as f64 - est.mean).amax() < 1e-10);
    }
}

/// Cross differences commute up to truncation error.
#[test]
fn raw_second_differences_are_nearly_symmetric() {
    let problem = random_tabular(&RandomTabular::new(4, Setting::FirstExit, 2)).unwrap();
    let theta = random_theta(problem.n_params(), 2, 0.5);
    let h = fd_hessian(&problem, &theta, 1e-3).unwrap();
    assert!((&h.raw - h.raw.transpose()).amax() < 1e-6);
}

#[test]
fn rollouts_do_not_depend_on_thread_count() {
    let problem = random_tabular(&RandomTabular::new(6, Setting::FirstExit, 9)).unwrap();
    let theta = random_theta(problem.n_params(), 9, 0.5);
    let term = Termination::Terminal { cap: 10_000 };
    let one = generate_rollouts(&problem, &theta, 200, term, 77, Some(1)).unwrap();
    let four = generate_rollouts(&problem, &theta, 200, term, 77, Some(4)).unwrap();
    assert_eq!(one.rollouts, four.rollouts);
}

/// With γ = 0 only the initial cost counts: `∇J = Σ_x p0(x) ∇L(x)`.
#[test]
fn zero_discount_gradient_is_initial_cost_gradient() {
    let problem = random_tabular(&RandomTabular::new(5, Setting::EpisodicDiscounted { gamma: 0.0 }, 3)).unwrap();
    let theta = random_theta(problem.n_params(), 3, 0.5);
    let mut expected = nalgebra::DVector::zeros(problem.n_params());
    for (x, w) in problem.p0_weights().iter().enumerate() {
        expected += problem.cost.grad(&x, &theta, 0) * *w;
    }
    assert!((exact_gradient(&problem, &theta).unwrap() - expected).amax() < 1e-14);
}
