//! Averaging rotations: the projection of a mean of rotations onto SO(n).

mod common;

use common::{frobenius, haar_rotation, to_matrix};
use neural_pca::linalg::{is_special_orthogonal, project_to_son, rotation_2d};
use neural_pca::Matrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::f64::consts::PI;

fn mean(rots: &[Vec<Vec<f64>>]) -> Vec<Vec<f64>> {
    let n = rots[0].len();
    let mut m = vec![vec![0.0; n]; n];
    for r in rots {
        for i in 0..n {
            for j in 0..n {
                m[i][j] += r[i][j] / rots.len() as f64;
            }
        }
    }
    m
}

/// The projection is a rotation and no random rotation is closer to the mean.
#[test]
fn projected_mean_of_haar_rotations_beats_random_candidates() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let candidates: Vec<Vec<Vec<f64>>> = (0..100_000).map(|_| haar_rotation(3, &mut rng)).collect();
    for set in 0..100 {
        let rots: Vec<Vec<Vec<f64>>> = (0..20).map(|_| haar_rotation(3, &mut rng)).collect();
        let vbar = mean(&rots);
        let r = project_to_son(&to_matrix(&vbar)).unwrap().rotation;
        assert!(is_special_orthogonal(&r, 1e-10), "set {set}: not in SO(3)");
        let ours = frobenius(&vbar, &r);
        let best = candidates
            .iter()
            .map(|c| frobenius(&vbar, &to_matrix(c)))
            .fold(f64::INFINITY, f64::min);
        assert!(ours <= best + 1e-12, "set {set}: {ours} vs candidate {best}");
    }
}

/// In the plane the mean of two rotations projects to the half-angle rotation.
#[test]
fn planar_mean_is_half_angle() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..100 {
        let a: f64 = rng.random_range(-PI..PI);
        // Keep the pair less than a half turn apart so the mean is nonzero.
        let b = a + rng.random_range(-0.95 * PI..0.95 * PI);
        let vbar = rotation_2d(a).add(&rotation_2d(b)).unwrap().scale(0.5);
        let r = project_to_son(&vbar).unwrap().rotation;
        let err = r.sub(&rotation_2d(0.5 * (a + b))).unwrap().max_abs();
        assert!(err < 1e-8, "angles ({a}, {b}): error {err:e}");
    }
}

#[test]
fn reflections_are_corrected_to_rotations() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for n in 2..6 {
        let mut r = haar_rotation(n, &mut rng);
        for row in r.iter_mut() {
            row[0] = -row[0];
        }
        let noisy: Vec<Vec<f64>> = r
            .iter()
            .map(|row| row.iter().map(|v| v + 0.01 * rng.random_range(-1.0..1.0)).collect())
            .collect();
        let p = project_to_son(&to_matrix(&noisy)).unwrap();
        assert!(is_special_orthogonal(&p.rotation, 1e-10));
    }
}

#[test]
fn rotations_are_fixed_points() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for n in 2..8 {
        let r = to_matrix(&haar_rotation(n, &mut rng));
        let p = project_to_son(&r).unwrap();
        assert!(p.rotation.sub(&r).unwrap().max_abs() < 1e-12);
        assert!(!p.degenerate);
    }
    let zero = project_to_son(&Matrix::zeros(3, 3)).unwrap();
    assert!(zero.degenerate);
}
