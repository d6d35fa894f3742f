//! Thin singular value decomposition with a reproducible sign convention.

use nalgebra::DMatrix;

use super::Matrix;
use crate::error::{Error, Result};

const MAX_SVD_ITERATIONS: usize = 10_000;

/// `w = u · diag(sigma) · vᵀ` with `m = min(rows, cols)` triplets.
#[derive(Debug, Clone, PartialEq)]
pub struct SvdResult {
    pub u: Matrix,
    pub sigma: Vec<f64>,
    pub v: Matrix,
}

impl SvdResult {
    pub fn rank(&self) -> usize {
        self.sigma.len()
    }

    pub fn reconstruct(&self) -> Matrix {
        Matrix::from_factors(&self.u, &self.sigma, &self.v)
    }
}

/// Computes the thin SVD of `w`.
///
/// Singular values are sorted descending (stable, so ties keep the solver's
/// column order). Each triplet is sign-normalized so that the
/// largest-magnitude entry of its `u` column is nonnegative; the matching `v`
/// column is flipped with it.
pub fn svd(w: &Matrix) -> Result<SvdResult> {
    if w.rows() == 0 || w.cols() == 0 {
        return Err(Error::InvalidInput("svd of an empty matrix".into()));
    }
    if !w.is_finite() {
        return Err(Error::InvalidInput("svd input has non-finite entries".into()));
    }
    let (o, i) = w.shape();
    let m = o.min(i);
    let dm = DMatrix::from_row_slice(o, i, w.data());
    let dec = nalgebra::SVD::try_new(dm, true, true, f64::EPSILON, MAX_SVD_ITERATIONS)
        .ok_or_else(|| Error::NumericalFailure("svd did not converge".into()))?;
    let (nu, nvt) = match (dec.u, dec.v_t) {
        (Some(u), Some(v_t)) => (u, v_t),
        _ => return Err(Error::NumericalFailure("svd vectors missing".into())),
    };
    let values = dec.singular_values;

    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| values[b].total_cmp(&values[a]));

    let mut u = Matrix::zeros(o, m);
    let mut v = Matrix::zeros(i, m);
    let mut sigma = Vec::with_capacity(m);
    for (k, &src) in order.iter().enumerate() {
        let mut pivot = 0.0f64;
        for r in 0..o {
            let x = nu[(r, src)];
            if x.abs() > pivot.abs() {
                pivot = x;
            }
        }
        let sign = if pivot < 0.0 { -1.0 } else { 1.0 };
        for r in 0..o {
            u[(r, k)] = sign * nu[(r, src)];
        }
        for c in 0..i {
            v[(c, k)] = sign * nvt[(src, c)];
        }
        sigma.push(values[src].max(0.0));
    }
    if !(u.is_finite() && v.is_finite() && sigma.iter().all(|s| s.is_finite())) {
        return Err(Error::NumericalFailure("svd produced non-finite output".into()));
    }
    Ok(SvdResult { u, sigma, v })
}
