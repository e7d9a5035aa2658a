//! The density-ratio estimator against the closed form for jointly Gaussian
//! pairs.

mod common;

use common::gaussian;
use neural_pca::eval::{estimate_mi, MiConfig};
use neural_pca::Matrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn correlated(rho: f64, n: usize, seed: u64) -> (Matrix, Matrix) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = gaussian(n, 1, &mut rng);
    let e = gaussian(n, 1, &mut rng);
    let z = x.scale(rho).add(&e.scale((1.0 - rho * rho).sqrt())).unwrap();
    (x, z)
}

/// Estimates grow with the correlation and never go negative. How close they
/// come to the closed form is reported by the acceptance suite.
#[test]
fn gaussian_pairs_track_correlation() {
    let est: Vec<f64> = [0.0, 0.5, 0.9]
        .iter()
        .map(|rho| {
            let (x, z) = correlated(*rho, 5000, 21);
            estimate_mi(&x, &z, &MiConfig { seed: 21, ..MiConfig::default() }).unwrap().0.mi
        })
        .collect();
    let truth = -0.5 * (1.0 - 0.81f64).ln();
    assert!(est.iter().all(|m| *m >= 0.0), "{est:?}");
    assert!(est[2] > est[1] && est[2] > est[0] + 0.5 * truth, "{est:?}");
}

#[test]
fn independent_copy_carries_no_more_than_the_original() {
    let (x, z) = correlated(0.9, 4000, 5);
    let shuffled = correlated(0.9, 4000, 6).1;
    let cfg = MiConfig { steps: 1000, seed: 5, ..MiConfig::default() };
    let paired = estimate_mi(&x, &z, &cfg).unwrap().0.mi;
    let unpaired = estimate_mi(&x, &shuffled, &cfg).unwrap().0.mi;
    assert!(unpaired < paired, "{unpaired} vs {paired}");
}
