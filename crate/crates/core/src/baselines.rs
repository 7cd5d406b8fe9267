//! Regression baselines that ignore the state dynamics: online SGD, OLS and
//! ridge regression on the stacked measurement rows.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Largest accepted condition number of `H̄ᵀH̄` for OLS.
pub const MAX_GRAM_CONDITION: f64 = 1e12;

/// Stacked measurement rows `H̄` (N × n) and targets `Ȳ`.
#[derive(Debug, Clone, PartialEq)]
pub struct RegressionProblem {
    pub h_bar: DMatrix<f64>,
    pub y: DVector<f64>,
}

impl RegressionProblem {
    pub fn new(h_bar: DMatrix<f64>, y: DVector<f64>) -> Result<Self> {
        if h_bar.nrows() != y.len() {
            return Err(Error::Config(format!(
                "H̄ has {} rows but Y has {} entries",
                h_bar.nrows(),
                y.len()
            )));
        }
        Ok(Self { h_bar, y })
    }

    /// Problem built from the first `count` measurement steps; vector
    /// measurements contribute one row per component.
    pub fn from_steps(h_seq: &[DMatrix<f64>], y_seq: &[DVector<f64>], count: usize, n: usize) -> Result<Self> {
        let rows: usize = h_seq[..count].iter().map(|h| h.nrows()).sum();
        let mut h_bar = DMatrix::zeros(rows, n);
        let mut y = DVector::zeros(rows);
        let mut r = 0;
        for (h, yt) in h_seq[..count].iter().zip(&y_seq[..count]) {
            if h.ncols() != n || h.nrows() != yt.len() {
                return Err(Error::Config("measurement matrix and observation do not conform".into()));
            }
            for j in 0..h.nrows() {
                h_bar.row_mut(r).copy_from(&h.row(j));
                y[r] = yt[j];
                r += 1;
            }
        }
        Self::new(h_bar, y)
    }

    pub fn n(&self) -> usize {
        self.h_bar.ncols()
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }
}

/// Online least-squares SGD from `x̂ = 0`:
/// `x̂ ← x̂ − 2α hᵀ(h x̂ − y)` over the rows in order, `passes` times.
pub fn sgd_estimate(p: &RegressionProblem, alpha: f64, passes: usize) -> Result<DVector<f64>> {
    sgd_estimate_with_tolerance(p, alpha, passes, None)
}

/// As [`sgd_estimate`], stopping after a pass whose full-batch gradient norm
/// drops below `grad_tol`.
pub fn sgd_estimate_with_tolerance(
    p: &RegressionProblem,
    alpha: f64,
    passes: usize,
    grad_tol: Option<f64>,
) -> Result<DVector<f64>> {
    if !(alpha > 0.0) {
        return Err(Error::Range {
            name: "alpha",
            value: alpha,
            allowed: "(0, inf)",
        });
    }
    if passes == 0 {
        return Err(Error::Config("SGD needs at least one pass".into()));
    }
    let mut x = DVector::zeros(p.n());
    for _ in 0..passes {
        for (row, &y) in p.h_bar.row_iter().zip(p.y.iter()) {
            let residual = row.dot(&x.transpose()) - y;
            x.axpy(-2.0 * alpha * residual, &row.transpose(), 1.0);
        }
        if let Some(tol) = grad_tol {
            let grad = p.h_bar.transpose() * (&p.h_bar * &x - &p.y) * 2.0;
            if grad.norm() < tol {
                break;
            }
        }
    }
    Ok(x)
}

/// Least squares through the SVD of `H̄`.
pub fn ols_estimate(p: &RegressionProblem) -> Result<DVector<f64>> {
    let n = p.n();
    if p.len() < n {
        return Err(Error::Numerical {
            message: format!("OLS needs at least {n} rows, got {}", p.len()),
            condition: Some(f64::INFINITY),
        });
    }
    let svd = p.h_bar.clone().svd(true, true);
    let s = &svd.singular_values;
    let (smax, smin) = (s.max(), s.min());
    let cond = if smin > 0.0 { (smax / smin).powi(2) } else { f64::INFINITY };
    if !(cond < MAX_GRAM_CONDITION) {
        return Err(Error::Numerical {
            message: "design matrix is rank deficient".into(),
            condition: Some(cond),
        });
    }
    Ok(spectral_solve(&svd, &p.y, |si| 1.0 / si))
}

/// Minimum-norm least squares (pseudo-inverse); defined for any problem.
pub fn min_norm_estimate(p: &RegressionProblem) -> DVector<f64> {
    if p.is_empty() {
        return DVector::zeros(p.n());
    }
    let svd = p.h_bar.clone().svd(true, true);
    let tol = svd.singular_values.max() * f64::EPSILON * p.len().max(p.n()) as f64;
    spectral_solve(&svd, &p.y, |si| if si > tol { 1.0 / si } else { 0.0 })
}

/// `(H̄ᵀH̄ + λI)⁻¹ H̄ᵀ Ȳ`; `λ = 0` defers to OLS.
pub fn ridge_estimate(p: &RegressionProblem, lambda: f64) -> Result<DVector<f64>> {
    if !(lambda >= 0.0) {
        return Err(Error::Range {
            name: "lambda",
            value: lambda,
            allowed: "[0, inf)",
        });
    }
    if lambda == 0.0 {
        return ols_estimate(p);
    }
    if p.is_empty() {
        return Ok(DVector::zeros(p.n()));
    }
    let svd = p.h_bar.clone().svd(true, true);
    Ok(spectral_solve(&svd, &p.y, |si| si / (si * si + lambda)))
}

fn spectral_solve(
    svd: &nalgebra::SVD<f64, nalgebra::Dyn, nalgebra::Dyn>,
    y: &DVector<f64>,
    filter: impl Fn(f64) -> f64,
) -> DVector<f64> {
    let u = svd.u.as_ref().expect("left singular vectors");
    let v_t = svd.v_t.as_ref().expect("right singular vectors");
    let mut coeffs = u.transpose() * y;
    for (c, &si) in coeffs.iter_mut().zip(svd.singular_values.iter()) {
        *c *= filter(si);
    }
    v_t.transpose() * coeffs
}
