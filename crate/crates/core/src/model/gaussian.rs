use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::RngCore;

use super::{standard_normal, Chain, Cost, InitialDistribution};
use crate::error::{invalid, Result};

/// Affine feedback `μ(x,θ) = Kx + k` with `K: m×n`, `k: m`.
///
/// θ is packed one output at a time: `[K_i0 .. K_i(n-1), k_i]` for `i = 0..m`,
/// so `n_θ = m (n + 1)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LinearPolicy {
    pub state_dim: usize,
    pub action_dim: usize,
}

impl LinearPolicy {
    pub fn new(state_dim: usize, action_dim: usize) -> Self {
        Self { state_dim, action_dim }
    }

    pub fn n_params(&self) -> usize {
        self.action_dim * (self.state_dim + 1)
    }

    pub fn eval(&self, x: &DVector<f64>, theta: &[f64]) -> DVector<f64> {
        let n = self.state_dim;
        DVector::from_fn(self.action_dim, |i, _| {
            let block = &theta[i * (n + 1)..(i + 1) * (n + 1)];
            block[..n].iter().zip(x.iter()).map(|(a, b)| a * b).sum::<f64>() + block[n]
        })
    }

    /// `∇θμ` as an `n_θ × m` matrix.
    pub fn jacobian(&self, x: &DVector<f64>) -> DMatrix<f64> {
        let n = self.state_dim;
        let mut j = DMatrix::zeros(self.n_params(), self.action_dim);
        for i in 0..self.action_dim {
            for c in 0..n {
                j[(i * (n + 1) + c, i)] = x[c];
            }
            j[(i * (n + 1) + n, i)] = 1.0;
        }
        j
    }
}

/// Continuous-state chain `x' ~ N(Ax + Bμ(x,θ), S)`.
#[derive(Debug, Clone)]
pub struct GaussianChain {
    a: DMatrix<f64>,
    b: DMatrix<f64>,
    cov: DMatrix<f64>,
    cov_chol: Cholesky<f64, Dyn>,
    cov_inv: DMatrix<f64>,
    log_norm: f64,
    policy: LinearPolicy,
}

pub fn make_gaussian_chain(
    a: DMatrix<f64>,
    b: DMatrix<f64>,
    cov: DMatrix<f64>,
    policy: LinearPolicy,
) -> Result<GaussianChain> {
    GaussianChain::new(a, b, cov, policy)
}

impl GaussianChain {
    pub fn new(a: DMatrix<f64>, b: DMatrix<f64>, cov: DMatrix<f64>, policy: LinearPolicy) -> Result<Self> {
        let n = a.nrows();
        if a.ncols() != n || b.nrows() != n || cov.nrows() != n || cov.ncols() != n {
            return invalid("dynamics matrices have inconsistent dimensions");
        }
        if b.ncols() != policy.action_dim || policy.state_dim != n {
            return invalid("policy dimensions do not match the dynamics");
        }
        if (&cov - cov.transpose()).amax() > 1e-12 {
            return invalid("transition covariance is not symmetric");
        }
        let Some(cov_chol) = cov.clone().cholesky() else {
            return invalid("transition covariance is not positive definite");
        };
        let cov_inv = cov_chol.inverse();
        let log_det: f64 = cov_chol.l().diagonal().iter().map(|d| 2.0 * d.ln()).sum();
        let log_norm = -0.5 * (n as f64 * (2.0 * std::f64::consts::PI).ln() + log_det);
        Ok(Self { a, b, cov, cov_chol, cov_inv, log_norm, policy })
    }

    pub fn state_dim(&self) -> usize {
        self.a.nrows()
    }

    pub fn policy(&self) -> LinearPolicy {
        self.policy
    }

    pub fn covariance(&self) -> &DMatrix<f64> {
        &self.cov
    }

    /// Bottleneck value `μ(x,θ)`.
    pub fn mu(&self, x: &DVector<f64>, theta: &[f64]) -> DVector<f64> {
        self.policy.eval(x, theta)
    }

    /// Bottleneck Jacobian `∇θμ` (`n_θ × m`).
    pub fn mu_jacobian(&self, x: &DVector<f64>) -> DMatrix<f64> {
        self.policy.jacobian(x)
    }

    /// Transition mean `m(x,θ) = Ax + Bμ(x,θ)`.
    pub fn mean(&self, x: &DVector<f64>, theta: &[f64]) -> DVector<f64> {
        &self.a * x + &self.b * self.mu(x, theta)
    }

    /// `∇θm` (`n_θ × n`).
    pub fn mean_jacobian(&self, x: &DVector<f64>) -> DMatrix<f64> {
        self.mu_jacobian(x) * self.b.transpose()
    }

    /// Closed-form Fisher matrix `E[∇θm S⁻¹ ∇θmᵀ]` given the second moment
    /// `E[x̃x̃ᵀ]` of the augmented state `x̃ = (x, 1)`.
    pub fn fisher_from_moment(&self, augmented_moment: &DMatrix<f64>) -> DMatrix<f64> {
        let c = self.b.transpose() * &self.cov_inv * &self.b;
        c.kronecker(augmented_moment)
    }

    /// Second moment of `x̃ = (x, 1)` under the normalized discounted
    /// occupancy `(1-γ) Σ_t γ^t Pr(x_t)`, summed until `γ^t < 1e-17`.
    pub fn discounted_augmented_moment(
        &self,
        theta: &[f64],
        p0: &InitialDistribution,
        gamma: f64,
    ) -> Result<DMatrix<f64>> {
        let InitialDistribution::Gaussian { mean, cov } = p0 else {
            return invalid("Gaussian chain needs a Gaussian initial distribution");
        };
        if !(gamma > 0.0 && gamma < 1.0) {
            return invalid("discounted moments need 0 < γ < 1");
        }
        let n = self.state_dim();
        // closed loop x' = F x + c + noise
        let k = DMatrix::from_fn(self.policy.action_dim, n, |i, j| theta[i * (n + 1) + j]);
        let kb = DVector::from_fn(self.policy.action_dim, |i, _| theta[i * (n + 1) + n]);
        let f = &self.a + &self.b * k;
        let c = &self.b * kb;
        let mut m = mean.clone();
        let mut second = cov + mean * mean.transpose();
        let mut acc = DMatrix::zeros(n + 1, n + 1);
        let mut w = 1.0 - gamma;
        while w > 1e-17 {
            for i in 0..n {
                for j in 0..n {
                    acc[(i, j)] += w * second[(i, j)];
                }
                acc[(i, n)] += w * m[i];
                acc[(n, i)] += w * m[i];
            }
            acc[(n, n)] += w;
            let fm = &f * &m;
            second = &f * &second * f.transpose()
                + &fm * c.transpose()
                + &c * fm.transpose()
                + &c * c.transpose()
                + &self.cov;
            m = fm + &c;
            w *= gamma;
        }
        Ok(acc)
    }
}

impl Chain<DVector<f64>> for GaussianChain {
    fn n_params(&self) -> usize {
        self.policy.n_params()
    }

    fn sample(&self, x: &DVector<f64>, theta: &[f64], _t: usize, rng: &mut dyn RngCore) -> DVector<f64> {
        self.mean(x, theta) + self.cov_chol.l() * standard_normal(self.state_dim(), rng)
    }

    fn log_prob(&self, x: &DVector<f64>, next: &DVector<f64>, theta: &[f64], _t: usize) -> f64 {
        let r = next - self.mean(x, theta);
        self.log_norm - 0.5 * r.dot(&(&self.cov_inv * &r))
    }

    fn score(&self, x: &DVector<f64>, next: &DVector<f64>, theta: &[f64], _t: usize) -> DVector<f64> {
        let r = next - self.mean(x, theta);
        self.mean_jacobian(x) * (&self.cov_inv * r)
    }

    fn score_hessian(
        &self,
        x: &DVector<f64>,
        _next: &DVector<f64>,
        _theta: &[f64],
        _t: usize,
    ) -> Option<DMatrix<f64>> {
        let j = self.mean_jacobian(x);
        Some(-(&j * &self.cov_inv * j.transpose()))
    }
}

/// Quadratic regulator cost `xᵀQx + μ(x,θ)ᵀRμ(x,θ)`.
#[derive(Debug, Clone)]
pub struct GaussianControlCost {
    q: DMatrix<f64>,
    r: DMatrix<f64>,
    policy: LinearPolicy,
}

impl GaussianControlCost {
    pub fn new(q: DMatrix<f64>, r: DMatrix<f64>, policy: LinearPolicy) -> Result<Self> {
        if q.nrows() != policy.state_dim || r.nrows() != policy.action_dim {
            return invalid("cost matrices do not match the policy dimensions");
        }
        Ok(Self { q, r, policy })
    }
}

impl Cost<DVector<f64>> for GaussianControlCost {
    fn n_params(&self) -> usize {
        self.policy.n_params()
    }

    fn value(&self, x: &DVector<f64>, theta: &[f64], _t: usize) -> f64 {
        let u = self.policy.eval(x, theta);
        x.dot(&(&self.q * x)) + u.dot(&(&self.r * &u))
    }

    fn grad(&self, x: &DVector<f64>, theta: &[f64], _t: usize) -> DVector<f64> {
        let u = self.policy.eval(x, theta);
        self.policy.jacobian(x) * ((&self.r + self.r.transpose()) * u)
    }

    fn hessian(&self, x: &DVector<f64>, _theta: &[f64], _t: usize) -> Option<DMatrix<f64>> {
        let j = self.policy.jacobian(x);
        Some(&j * (&self.r + self.r.transpose()) * j.transpose())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn scalar_chain() -> GaussianChain {
        let one = DMatrix::from_element(1, 1, 1.0);
        make_gaussian_chain(DMatrix::zeros(1, 1), one.clone(), one, LinearPolicy::new(1, 1)).unwrap()
    }

    #[test]
    fn score_vanishes_at_the_mean() {
        let c = scalar_chain();
        let x = DVector::from_element(1, 0.0);
        let theta = [0.0, 0.4];
        let s = c.score(&x, &DVector::from_element(1, 0.4), &theta, 0);
        assert!(s.amax() < 1e-15);
    }

    #[test]
    fn score_is_residual_over_variance() {
        let c = scalar_chain();
        let x = DVector::from_element(1, 0.0);
        let s = c.score(&x, &DVector::from_element(1, 1.0), &[0.0, 0.0], 0);
        assert!((s[1] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn sample_mean_matches_offset() {
        let c = scalar_chain();
        let x = DVector::from_element(1, 0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let n = 100_000;
        let mean: f64 = (0..n).map(|_| c.sample(&x, &[0.0, 0.3], 0, &mut rng)[0]).sum::<f64>() / n as f64;
        assert!((mean - 0.3).abs() < 3.0 / (n as f64).sqrt());
    }

    #[test]
    fn non_positive_definite_covariance_is_rejected() {
        let one = DMatrix::from_element(1, 1, 1.0);
        let bad = DMatrix::from_element(1, 1, -1.0);
        assert!(make_gaussian_chain(DMatrix::zeros(1, 1), one, bad, LinearPolicy::new(1, 1)).is_err());
    }
}
