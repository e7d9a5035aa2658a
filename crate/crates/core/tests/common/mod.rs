//! Reference computations shared by the integration tests. Nothing here calls
//! into the library's linear algebra, so the tests compare against
//! independent arithmetic.
#![allow(dead_code)]

use neural_pca::Matrix;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

pub fn gaussian(rows: usize, cols: usize, rng: &mut impl Rng) -> Matrix {
    let data = (0..rows * cols).map(|_| StandardNormal.sample(rng)).collect();
    Matrix::from_vec(rows, cols, data).unwrap()
}

/// Determinant by Gaussian elimination with partial pivoting.
pub fn det(a: &[Vec<f64>]) -> f64 {
    let n = a.len();
    let mut m: Vec<Vec<f64>> = a.to_vec();
    let mut d = 1.0;
    for c in 0..n {
        let p = (c..n)
            .max_by(|&i, &j| m[i][c].abs().partial_cmp(&m[j][c].abs()).unwrap())
            .unwrap();
        if m[p][c] == 0.0 {
            return 0.0;
        }
        if p != c {
            m.swap(p, c);
            d = -d;
        }
        d *= m[c][c];
        for r in c + 1..n {
            let f = m[r][c] / m[c][c];
            for k in c..n {
                m[r][k] -= f * m[c][k];
            }
        }
    }
    d
}

/// `log |det ∂f/∂x|` at `x` from central differences.
pub fn fd_log_abs_det(f: impl Fn(&[f64]) -> Vec<f64>, x: &[f64], h: f64) -> f64 {
    let n = x.len();
    let mut jac = vec![vec![0.0; n]; n];
    for j in 0..n {
        let mut xp = x.to_vec();
        let mut xm = x.to_vec();
        xp[j] += h;
        xm[j] -= h;
        let (fp, fm) = (f(&xp), f(&xm));
        for i in 0..n {
            jac[i][j] = (fp[i] - fm[i]) / (2.0 * h);
        }
    }
    det(&jac).abs().ln()
}

/// Haar-distributed rotation: Gram–Schmidt on a Gaussian matrix, then a
/// column sign flip if the determinant is negative.
pub fn haar_rotation(n: usize, rng: &mut impl Rng) -> Vec<Vec<f64>> {
    loop {
        let mut cols: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..n).map(|_| StandardNormal.sample(&mut *rng)).collect())
            .collect();
        let mut ok = true;
        for j in 0..n {
            for k in 0..j {
                let d: f64 = (0..n).map(|i| cols[j][i] * cols[k][i]).sum();
                for i in 0..n {
                    cols[j][i] -= d * cols[k][i];
                }
            }
            let norm = cols[j].iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm < 1e-8 {
                ok = false;
                break;
            }
            cols[j].iter_mut().for_each(|v| *v /= norm);
        }
        if !ok {
            continue;
        }
        // Row-major matrix whose columns are `cols`.
        let mut m: Vec<Vec<f64>> = (0..n).map(|i| (0..n).map(|j| cols[j][i]).collect()).collect();
        if det(&m) < 0.0 {
            for row in m.iter_mut() {
                row[0] = -row[0];
            }
        }
        return m;
    }
}

pub fn to_matrix(rows: &[Vec<f64>]) -> Matrix {
    Matrix::from_rows(rows).unwrap()
}

pub fn frobenius(a: &[Vec<f64>], b: &Matrix) -> f64 {
    let mut s = 0.0;
    for (i, row) in a.iter().enumerate() {
        for (j, v) in row.iter().enumerate() {
            s += (v - b[(i, j)]).powi(2);
        }
    }
    s.sqrt()
}

/// `‖a − b‖ / max(‖a‖, ‖b‖)`, zero when both vanish.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let scale = a
        .iter()
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt()
        .max(b.iter().map(|x| x * x).sum::<f64>().sqrt());
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

/// Adds `N(0, scale²)` noise to every parameter.
pub fn perturb(params: Vec<&mut Matrix>, scale: f64, rng: &mut impl Rng) {
    for p in params {
        for v in p.as_mut_slice() {
            let z: f64 = StandardNormal.sample(&mut *rng);
            *v += scale * z;
        }
    }
}
