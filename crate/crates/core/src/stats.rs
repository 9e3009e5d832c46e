//! Sample statistics over per-rollout vectors and matrices.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Sample mean and standard error of the mean, per coordinate.
///
/// A single sample has zero standard error.
pub fn mean_and_stderr(samples: &[DVector<f64>], dim: usize) -> (DVector<f64>, DVector<f64>) {
    let n = samples.len();
    let mut mean = DVector::zeros(dim);
    if n == 0 {
        return (mean, DVector::zeros(dim));
    }
    for s in samples {
        mean += s;
    }
    mean /= n as f64;
    if n < 2 {
        return (mean, DVector::zeros(dim));
    }
    let mut var = DVector::zeros(dim);
    for s in samples {
        let d = s - &mean;
        var += d.component_mul(&d);
    }
    let stderr = (var / ((n - 1) as f64 * n as f64)).map(f64::sqrt);
    (mean, stderr)
}

/// Entrywise mean and standard error of sampled matrices.
pub fn matrix_mean_and_stderr(samples: &[DMatrix<f64>], rows: usize, cols: usize) -> (DMatrix<f64>, DMatrix<f64>) {
    let n = samples.len();
    let mut mean = DMatrix::zeros(rows, cols);
    if n == 0 {
        return (mean, DMatrix::zeros(rows, cols));
    }
    for s in samples {
        mean += s;
    }
    mean /= n as f64;
    if n < 2 {
        return (mean, DMatrix::zeros(rows, cols));
    }
    let mut var = DMatrix::zeros(rows, cols);
    for s in samples {
        let d = s - &mean;
        var += d.component_mul(&d);
    }
    (mean, (var / ((n - 1) as f64 * n as f64)).map(f64::sqrt))
}

/// Unbiased sample covariance of vectors.
pub fn covariance(samples: &[DVector<f64>], dim: usize) -> DMatrix<f64> {
    let n = samples.len();
    let (mean, _) = mean_and_stderr(samples, dim);
    let mut c = DMatrix::zeros(dim, dim);
    for s in samples {
        let d = s - &mean;
        c += &d * d.transpose();
    }
    if n > 1 {
        c /= (n - 1) as f64;
    }
    c
}

/// Bootstrap replicates of a statistic computed on paired resamples of two
/// equally long sample sets (the same indices are drawn for both).
pub fn paired_bootstrap<F>(a: &[DVector<f64>], b: &[DVector<f64>], replicates: usize, seed: u64, stat: F) -> Vec<f64>
where
    F: Fn(&[DVector<f64>], &[DVector<f64>]) -> f64,
{
    assert_eq!(a.len(), b.len(), "paired bootstrap needs equal sample counts");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = a.len();
    let mut ra = Vec::with_capacity(n);
    let mut rb = Vec::with_capacity(n);
    (0..replicates)
        .map(|_| {
            ra.clear();
            rb.clear();
            for _ in 0..n {
                let i = rng.random_range(0..n);
                ra.push(a[i].clone());
                rb.push(b[i].clone());
            }
            stat(&ra, &rb)
        })
        .collect()
}

/// Empirical `q`-quantile (nearest rank) of unsorted values.
pub fn quantile(values: &[f64], q: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let k = ((q * v.len() as f64).ceil() as usize).clamp(1, v.len()) - 1;
    v[k]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stderr_of_known_samples() {
        let s: Vec<DVector<f64>> = [1.0, 2.0, 3.0, 4.0].iter().map(|v| DVector::from_element(1, *v)).collect();
        let (m, e) = mean_and_stderr(&s, 1);
        assert_eq!(m[0], 2.5);
        // sample variance 5/3, n = 4
        assert!((e[0] - (5.0f64 / 3.0 / 4.0).sqrt()).abs() < 1e-15);
    }

    #[test]
    fn quantile_nearest_rank() {
        assert_eq!(quantile(&[5.0, 1.0, 3.0, 2.0, 4.0], 0.5), 3.0);
        assert_eq!(quantile(&[5.0, 1.0, 3.0, 2.0, 4.0], 0.05), 1.0);
    }
}
