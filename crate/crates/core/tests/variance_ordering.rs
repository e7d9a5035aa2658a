//! Latent variances come out sorted: exactly on the batch that defined the
//! rotation, and approximately on held-out data once statistics are frozen.

mod common;

use common::{gaussian, perturb};
use neural_pca::data::two_spiral;
use neural_pca::{build_variant, train, Matrix, ModelSpec, Split, TrainConfig, Variant};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn non_increasing(v: &[f64], slack: f64) -> bool {
    v.windows(2).all(|w| w[1] <= w[0] * (1.0 + slack))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    #[test]
    fn training_mode_variances_are_sorted(
        seed in any::<u64>(),
        n in 2usize..7,
        rows in 12usize..60,
        pca_ig in any::<bool>(),
    ) {
        let variant = if pca_ig { Variant::NeuralPcaIg } else { Variant::NeuralPca };
        let spec = ModelSpec { depth: 2, width: 8, seed, ..ModelSpec::new(variant, n) };
        let mut m = build_variant(&spec).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        perturb(m.params_mut(), 0.5, &mut rng);
        // Anisotropic input so the spectrum is spread.
        let scales: Vec<f64> = (0..n).map(|i| 0.2 + i as f64).collect();
        let mut x = gaussian(rows, n, &mut rng);
        for r in 0..rows {
            x.row_mut(r).iter_mut().zip(&scales).for_each(|(v, s)| *v *= s);
        }
        let var = m.forward(&x).unwrap().z.column_variances();
        prop_assert!(non_increasing(&var, 0.0), "{var:?}");
    }
}

#[test]
fn frozen_variances_are_nearly_sorted_on_held_out_spiral() {
    let ds = two_spiral(3000, 0.02, 1.75, 4).unwrap();
    let spec = ModelSpec { depth: 4, width: 32, seed: 4, ..ModelSpec::new(Variant::NeuralPca, 2) };
    let cfg = TrainConfig { iterations: 300, lr: 1e-3, eval_every: 0, seed: 4, ..TrainConfig::default() };
    let out = train(build_variant(&spec).unwrap(), &cfg, &ds.split_x(Split::Train), None).unwrap();
    let z: Matrix = out.model.forward_frozen(&ds.split_x(Split::Test)).unwrap().z;
    let var = z.column_variances();
    assert!(non_increasing(&var, 0.05), "{var:?}");
}
