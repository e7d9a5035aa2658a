//! Rotations: projection onto SO(n), Householder products and the sign
//! conventions applied to per-batch PCA rotations.

use super::matrix::{dot, Matrix};
use super::svd::svd_full;
use crate::error::{Error, Result};

/// Relative gap under which two singular values count as tied.
const TIE_TOL: f64 = 1e-10;

/// Nearest rotation to a square matrix in Frobenius norm.
#[derive(Debug, Clone)]
pub struct SoProjection {
    pub rotation: Matrix,
    /// The minimizer is not unique (tied or vanishing singular values where
    /// the determinant correction or the rank leaves a choice).
    pub degenerate: bool,
}

/// Orthogonal projection of `vbar` onto SO(n).
///
/// With `vbar = Q Λ Pᵀ` the unconstrained minimizer over O(n) is `Q Pᵀ`; when
/// that has determinant -1 the direction with the smallest singular value is
/// flipped, `Q diag(1, …, 1, -1) Pᵀ`. Among tied smallest singular values the
/// lowest index is flipped.
pub fn project_to_son(vbar: &Matrix) -> Result<SoProjection> {
    if !vbar.is_square() {
        return Err(Error::Shape(format!(
            "project_to_son needs a square matrix, got {:?}",
            vbar.shape()
        )));
    }
    let n = vbar.rows();
    let svd = svd_full(vbar)?;
    let q = &svd.u;
    let p = svd.v();
    let qpt = q.matmul_nt(&p)?;
    let det = qpt.determinant()?;

    let smax = svd.sigma.first().copied().unwrap_or(0.0);
    let smin = svd.sigma.last().copied().unwrap_or(0.0);
    let tol = TIE_TOL * smax.max(f64::MIN_POSITIVE);
    let mut degenerate = n > 0 && smin <= tol;

    if det > 0.0 {
        return Ok(SoProjection {
            rotation: qpt,
            degenerate,
        });
    }

    let flip = svd
        .sigma
        .iter()
        .position(|s| (s - smin).abs() <= tol)
        .unwrap_or(n - 1);
    if svd.sigma.iter().filter(|s| (*s - smin).abs() <= tol).count() > 1 {
        degenerate = true;
    }
    let mut q_flipped = q.clone();
    for r in 0..n {
        q_flipped[(r, flip)] = -q_flipped[(r, flip)];
    }
    Ok(SoProjection {
        rotation: q_flipped.matmul_nt(&p)?,
        degenerate,
    })
}

/// `H₁ H₂ ⋯ Hₖ` with `Hᵢ = I − 2 vᵢ vᵢᵀ / ‖vᵢ‖²`.
pub fn householder_product(vs: &[Vec<f64>]) -> Result<Matrix> {
    let n = vs.first().map_or(0, Vec::len);
    let mut r = Matrix::identity(n);
    for (i, v) in vs.iter().enumerate() {
        if v.len() != n {
            return Err(Error::Shape(format!(
                "householder vector {i} has length {}, expected {n}",
                v.len()
            )));
        }
        let nrm2 = dot(v, v);
        if nrm2.sqrt() <= 1e-12 {
            return Err(Error::Degenerate(format!(
                "householder vector {i} has near-zero norm"
            )));
        }
        // r ← r · H = r − 2 (r v) vᵀ / ‖v‖²
        for row in 0..n {
            let proj = 2.0 * dot(r.row(row), v) / nrm2;
            for (x, vi) in r.row_mut(row).iter_mut().zip(v) {
                *x -= proj * vi;
            }
        }
    }
    Ok(r)
}

/// Applies the sign convention for per-batch right singular vectors.
///
/// Without a reference, each column is flipped so that its largest-magnitude
/// entry is positive (first such entry on ties). With a reference, each column
/// is flipped to have a non-negative inner product with the matching
/// reference column. Either way, if the result has determinant -1 the last
/// column (smallest singular value) is negated.
pub fn canonicalize_rotation(v: &Matrix, reference: Option<&Matrix>) -> Result<Matrix> {
    let n = v.cols();
    let mut out = v.clone();
    for c in 0..n {
        let col = out.column(c);
        let flip = match reference {
            Some(r) => dot(&col, &r.column(c)) < 0.0,
            None => {
                let mut best = 0usize;
                for (i, x) in col.iter().enumerate() {
                    if x.abs() > col[best].abs() {
                        best = i;
                    }
                }
                col[best] < 0.0
            }
        };
        if flip {
            let neg: Vec<f64> = col.iter().map(|x| -x).collect();
            out.set_column(c, &neg);
        }
    }
    if n > 0 && out.determinant()? < 0.0 {
        let last: Vec<f64> = out.column(n - 1).iter().map(|x| -x).collect();
        out.set_column(n - 1, &last);
    }
    Ok(out)
}

/// Counter-clockwise planar rotation `[[cos, -sin], [sin, cos]]`.
pub fn rotation_2d(theta: f64) -> Matrix {
    let (s, c) = theta.sin_cos();
    Matrix::from_vec(2, 2, vec![c, -s, s, c]).expect("2x2")
}

/// Chordal (Frobenius) distance between two matrices of equal shape.
pub fn chordal_distance(a: &Matrix, b: &Matrix) -> Result<f64> {
    Ok(a.sub(b)?.frobenius_norm())
}

/// True when `m` is orthogonal within `tol` and has determinant +1.
pub fn is_special_orthogonal(m: &Matrix, tol: f64) -> bool {
    m.is_square()
        && m.orthogonality_error() <= tol
        && m.determinant().map(|d| (d - 1.0).abs() <= tol.max(1e-9)).unwrap_or(false)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    #[test]
    fn identity_is_fixed_point() {
        let p = project_to_son(&Matrix::identity(4)).unwrap();
        assert!(p.rotation.sub(&Matrix::identity(4)).unwrap().max_abs() < 1e-15);
        assert!(!p.degenerate);
    }

    #[test]
    fn mean_of_two_planar_rotations_matches_grid_search() {
        let (t1, t2) = (0.3_f64, 1.9_f64);
        let vbar = rotation_2d(t1).add(&rotation_2d(t2)).unwrap().scale(0.5);
        // Grid oracle over 10^6 angles.
        let steps = 1_000_000;
        let mut best = (f64::INFINITY, 0.0);
        for k in 0..steps {
            let th = -PI + 2.0 * PI * k as f64 / steps as f64;
            let d = chordal_distance(&rotation_2d(th), &vbar).unwrap();
            if d < best.0 {
                best = (d, th);
            }
        }
        let p = project_to_son(&vbar).unwrap().rotation;
        let expect = rotation_2d(best.1);
        assert!(p.sub(&expect).unwrap().max_abs() < 1e-5);
        assert!(p.sub(&rotation_2d(1.1)).unwrap().max_abs() < 1e-12);
    }

    #[test]
    fn determinant_correction_for_reflection_mean() {
        // diag(1, 1, -1) has Procrustes solution itself, with det -1.
        let vbar = Matrix::diag(&[1.0, 0.9, -0.5]);
        let p = project_to_son(&vbar).unwrap();
        assert!(is_special_orthogonal(&p.rotation, 1e-10));
        // Flipping the least significant direction yields the identity.
        assert!(p.rotation.sub(&Matrix::identity(3)).unwrap().max_abs() < 1e-12);
        assert!(!p.degenerate);
    }

    #[test]
    fn tied_flip_is_degenerate() {
        let vbar = Matrix::diag(&[1.0, -1.0]);
        let p = project_to_son(&vbar).unwrap();
        assert!(p.degenerate);
        assert!(is_special_orthogonal(&p.rotation, 1e-10));
    }

    #[test]
    fn householder_cases() {
        let r = householder_product(&[vec![1.0, 0.0], vec![1.0, 0.0]]).unwrap();
        assert!(r.sub(&Matrix::identity(2)).unwrap().max_abs() < 1e-15);
        let r = householder_product(&[vec![1.0]]).unwrap();
        assert_eq!(r.as_slice(), &[-1.0]);
        assert!(matches!(
            householder_product(&[vec![0.0, 1e-13]]),
            Err(Error::Degenerate(_))
        ));
    }

    #[test]
    fn canonical_signs() {
        let v = Matrix::from_rows(&[vec![-0.8, 0.6], vec![0.6, 0.8]]).unwrap();
        let c = canonicalize_rotation(&v, None).unwrap();
        // First column flipped to (0.8, -0.6); det then forces the second.
        assert_eq!(c.column(0), vec![0.8, -0.6]);
        assert!(c.determinant().unwrap() > 0.0);
    }
}
