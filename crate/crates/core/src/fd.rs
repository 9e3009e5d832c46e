//! Central finite differences, used as the reference every analytic
//! derivative is checked against. Steps scale as `h_i = h (1 + |θ_i|)`.

use nalgebra::{DMatrix, DVector};

use crate::error::{DsoError, Result};
use crate::exact::objective;
use crate::model::TabularProblem;

fn step(h: f64, theta_i: f64) -> f64 {
    h * (1.0 + theta_i.abs())
}

fn probe<F>(f: &F, theta: &[f64], coordinate: usize) -> Result<f64>
where
    F: Fn(&[f64]) -> Result<f64>,
{
    let v = f(theta)?;
    if v.is_finite() {
        Ok(v)
    } else {
        Err(DsoError::Probe { coordinate })
    }
}

/// Central-difference gradient of a scalar function.
pub fn fd_gradient_fn<F>(f: F, theta: &[f64], h: f64) -> Result<DVector<f64>>
where
    F: Fn(&[f64]) -> Result<f64>,
{
    let mut g = DVector::zeros(theta.len());
    let mut work = theta.to_vec();
    for i in 0..theta.len() {
        let hi = step(h, theta[i]);
        work[i] = theta[i] + hi;
        let plus = probe(&f, &work, i)?;
        work[i] = theta[i] - hi;
        let minus = probe(&f, &work, i)?;
        work[i] = theta[i];
        g[i] = (plus - minus) / (2.0 * hi);
    }
    Ok(g)
}

/// Central-difference Jacobian `J[(i, j)] = ∂f_i/∂θ_j` of a vector function.
pub fn fd_jacobian<F>(f: F, theta: &[f64], h: f64) -> Result<DMatrix<f64>>
where
    F: Fn(&[f64]) -> Result<DVector<f64>>,
{
    let mut cols = Vec::with_capacity(theta.len());
    let mut work = theta.to_vec();
    for j in 0..theta.len() {
        let hj = step(h, theta[j]);
        work[j] = theta[j] + hj;
        let plus = f(&work)?;
        work[j] = theta[j] - hj;
        let minus = f(&work)?;
        work[j] = theta[j];
        if plus.iter().chain(minus.iter()).any(|v| !v.is_finite()) {
            return Err(DsoError::Probe { coordinate: j });
        }
        cols.push((plus - minus) / (2.0 * hj));
    }
    if cols.is_empty() {
        return Ok(DMatrix::zeros(f(theta)?.len(), 0));
    }
    Ok(DMatrix::from_columns(&cols))
}

/// Second differences of a scalar function, raw and symmetrized.
#[derive(Debug, Clone, PartialEq)]
pub struct FdHessian {
    pub raw: DMatrix<f64>,
    pub symmetric: DMatrix<f64>,
}

/// Diagonal entries use the three-point rule, off-diagonal entries the
/// four-point cross difference.
pub fn fd_hessian_fn<F>(f: F, theta: &[f64], h: f64) -> Result<FdHessian>
where
    F: Fn(&[f64]) -> Result<f64>,
{
    let n = theta.len();
    let centre = probe(&f, theta, 0)?;
    let mut raw = DMatrix::zeros(n, n);
    let mut work = theta.to_vec();
    for i in 0..n {
        let hi = step(h, theta[i]);
        work[i] = theta[i] + hi;
        let plus = probe(&f, &work, i)?;
        work[i] = theta[i] - hi;
        let minus = probe(&f, &work, i)?;
        work[i] = theta[i];
        raw[(i, i)] = (plus - 2.0 * centre + minus) / (hi * hi);
        for j in 0..n {
            if j == i {
                continue;
            }
            let hj = step(h, theta[j]);
            let mut corner = |si: f64, sj: f64| {
                work[i] = theta[i] + si * hi;
                work[j] = theta[j] + sj * hj;
                let v = probe(&f, &work, i);
                work[i] = theta[i];
                work[j] = theta[j];
                v
            };
            let pp = corner(1.0, 1.0)?;
            let pm = corner(1.0, -1.0)?;
            let mp = corner(-1.0, 1.0)?;
            let mm = corner(-1.0, -1.0)?;
            raw[(i, j)] = (pp - pm - mp + mm) / (4.0 * hi * hj);
        }
    }
    let symmetric = (&raw + raw.transpose()) * 0.5;
    Ok(FdHessian { raw, symmetric })
}

/// Central-difference gradient of the exact objective.
pub fn fd_gradient(problem: &TabularProblem, theta: &[f64], h: f64) -> Result<DVector<f64>> {
    fd_gradient_fn(|th| objective(problem, th), theta, h)
}

/// Second differences of the exact objective.
pub fn fd_hessian(problem: &TabularProblem, theta: &[f64], h: f64) -> Result<FdHessian> {
    fd_hessian_fn(|th| objective(problem, th), theta, h)
}

/// Coordinatewise relative error of `a` against the reference `f`.
///
/// The denominator is `max(|a_i|, |f_i|, 1e-3 ‖f‖∞, 1e-8)` so coordinates
/// that are zero up to roundoff do not dominate.
pub fn relative_errors(a: &DVector<f64>, f: &DVector<f64>) -> Vec<f64> {
    let scale = f.amax();
    a.iter()
        .zip(f.iter())
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(1e-3 * scale).max(1e-8))
        .collect()
}

/// Largest entry of [`relative_errors`].
pub fn max_relative_error(a: &DVector<f64>, f: &DVector<f64>) -> f64 {
    relative_errors(a, f).into_iter().fold(0.0, f64::max)
}
