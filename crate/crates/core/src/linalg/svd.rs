//! Thin singular value decomposition by one-sided (Hestenes) Jacobi rotations.
//!
//! Columns of a working copy of `A` are orthogonalized pairwise in a fixed
//! cyclic order; the accumulated rotations form `V`. The column norms are the
//! singular values and the normalized columns form `U`. The sweep order is
//! fixed, so the result is a deterministic function of the input.

use super::matrix::{dot, Matrix};
use crate::error::{Error, Result};

/// Rotation threshold relative to the column norms.
pub const JACOBI_TOL: f64 = 1e-12;
pub const MAX_SWEEPS: usize = 60;

/// `x = u · diag(sigma) · vt`.
#[derive(Debug, Clone)]
pub struct SvdResult {
    /// `rows × cols`, orthonormal columns.
    pub u: Matrix,
    /// Non-increasing.
    pub sigma: Vec<f64>,
    /// `cols × cols`, orthogonal.
    pub vt: Matrix,
}

impl SvdResult {
    /// `V` (the transpose of `vt`).
    pub fn v(&self) -> Matrix {
        self.vt.transpose()
    }

    pub fn reconstruct(&self) -> Matrix {
        let mut us = self.u.clone();
        for r in 0..us.rows() {
            for (v, s) in us.row_mut(r).iter_mut().zip(&self.sigma) {
                *v *= s;
            }
        }
        us.matmul(&self.vt).expect("svd factors are conformant")
    }
}

/// Full thin SVD of a `rows × cols` matrix with `rows ≥ cols`.
pub fn svd_full(x: &Matrix) -> Result<SvdResult> {
    let (m, n) = x.shape();
    if m < n {
        return Err(Error::Shape(format!(
            "svd requires rows >= cols, got {m}x{n}"
        )));
    }
    if !x.is_finite() {
        return Err(Error::NonFinite("svd input".into()));
    }

    // Work column-major so that each column is a contiguous slice.
    let mut cols: Vec<Vec<f64>> = (0..n).map(|c| x.column(c)).collect();
    let mut v: Vec<Vec<f64>> = (0..n)
        .map(|c| {
            let mut e = vec![0.0; n];
            e[c] = 1.0;
            e
        })
        .collect();

    let mut converged = n < 2;
    for _ in 0..MAX_SWEEPS {
        if converged {
            break;
        }
        let mut rotated = false;
        for p in 0..n {
            for q in p + 1..n {
                let alpha = dot(&cols[p], &cols[p]);
                let beta = dot(&cols[q], &cols[q]);
                let gamma = dot(&cols[p], &cols[q]);
                if gamma == 0.0 || gamma.abs() <= JACOBI_TOL * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate_pair(&mut cols, p, q, c, s);
                rotate_pair(&mut v, p, q, c, s);
            }
        }
        if !rotated {
            converged = true;
        }
    }
    if !converged {
        return Err(Error::Decomposition(format!(
            "one-sided Jacobi did not converge in {MAX_SWEEPS} sweeps"
        )));
    }

    let norms: Vec<f64> = cols.iter().map(|c| dot(c, c).sqrt()).collect();
    let mut order: Vec<usize> = (0..n).collect();
    // Stable sort keeps the original column order among equal values.
    order.sort_by(|&a, &b| norms[b].partial_cmp(&norms[a]).expect("finite norms"));

    let sigma: Vec<f64> = order.iter().map(|&i| norms[i]).collect();
    let scale = sigma.first().copied().unwrap_or(0.0);
    let mut u = Matrix::zeros(m, n);
    let mut vt = Matrix::zeros(n, n);
    let mut null_cols = Vec::new();
    for (k, &i) in order.iter().enumerate() {
        if sigma[k] > scale * f64::EPSILON * m as f64 {
            let col: Vec<f64> = cols[i].iter().map(|c| c / sigma[k]).collect();
            u.set_column(k, &col);
        } else {
            null_cols.push(k);
        }
        for j in 0..n {
            vt[(k, j)] = v[i][j];
        }
    }
    complete_orthonormal_columns(&mut u, &null_cols);

    Ok(SvdResult { u, sigma, vt })
}

fn rotate_pair(cols: &mut [Vec<f64>], p: usize, q: usize, c: f64, s: f64) {
    let (left, right) = cols.split_at_mut(q);
    let cp = &mut left[p];
    let cq = &mut right[0];
    for (a, b) in cp.iter_mut().zip(cq.iter_mut()) {
        let ap = *a;
        let aq = *b;
        *a = c * ap - s * aq;
        *b = s * ap + c * aq;
    }
}

/// Fills the listed (zero) columns with unit vectors orthogonal to every other
/// column, by Gram-Schmidt against the standard basis.
fn complete_orthonormal_columns(u: &mut Matrix, null_cols: &[usize]) {
    if null_cols.is_empty() {
        return;
    }
    let m = u.rows();
    let mut filled: Vec<Vec<f64>> = (0..u.cols())
        .filter(|c| !null_cols.contains(c))
        .map(|c| u.column(c))
        .collect();
    let mut basis = 0;
    for &k in null_cols {
        while basis < m {
            let mut cand = vec![0.0; m];
            cand[basis] = 1.0;
            basis += 1;
            for _ in 0..2 {
                for f in &filled {
                    let d = dot(&cand, f);
                    cand.iter_mut().zip(f).for_each(|(c, fv)| *c -= d * fv);
                }
            }
            let norm = dot(&cand, &cand).sqrt();
            if norm > 1e-8 {
                cand.iter_mut().for_each(|c| *c /= norm);
                u.set_column(k, &cand);
                filled.push(cand);
                break;
            }
        }
    }
}
