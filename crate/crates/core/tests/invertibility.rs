//! Round trips and log-determinants of every variant, in training mode (the
//! batch's own statistics) and evaluation mode (averaged statistics).

mod common;

use common::{fd_log_abs_det, gaussian, perturb, rel_err};
use neural_pca::autodiff::{register_params, Tape};
use neural_pca::trainer::{objective, objective_value};
use neural_pca::{build_variant, GradientStop, Matrix, ModelSpec, NeuralPcaModel, Variant};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const ROUND_TRIP: f64 = 1e-8;
const LOGDET_REL: f64 = 1e-4;

/// A variant with random non-trivial parameters.
fn random_model(variant: Variant, n: usize, seed: u64) -> NeuralPcaModel {
    let spec = ModelSpec {
        depth: 3,
        width: 16,
        seed,
        ..ModelSpec::new(variant, n)
    };
    let mut m = build_variant(&spec).unwrap();
    perturb(m.params_mut(), 0.3, &mut ChaCha8Rng::seed_from_u64(seed ^ 0xABCD));
    m
}

/// Max over rows of the relative error between `|det J|` from central
/// differences of the frozen forward map and `exp(logdet)`.
fn logdet_error(model: &NeuralPcaModel, x: &Matrix, rows: usize) -> f64 {
    let fwd = model.forward_frozen(x).unwrap();
    let ld = fwd.logdet();
    let n = x.cols();
    let mut worst: f64 = 0.0;
    for r in 0..rows.min(x.rows()) {
        let f = |p: &[f64]| model.forward_frozen(&Matrix::row_vector(p)).unwrap().z.into_vec();
        let fd = fd_log_abs_det(f, x.row(r), 1e-6);
        assert_eq!(fd.is_finite(), true, "singular jacobian, n = {n}");
        worst = worst.max((fd - ld[r]).exp_m1().abs());
    }
    worst
}

fn check_variant(variant: Variant, n: usize, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let batch = gaussian(4 * n + 8, n, &mut rng);
    let mut model = random_model(variant, n, seed);

    // Training mode: the batch's own statistics. Freezing with that single
    // batch gives the same map as a fixed bijection we can invert.
    let train_fwd = model.forward(&batch).unwrap();
    let mut single = model.clone();
    single.freeze_statistics(&[batch.clone()]).unwrap();
    let same = single.forward_frozen(&batch).unwrap();
    assert!(
        same.z.sub(&train_fwd.z).unwrap().max_abs() < 1e-10,
        "{variant} n={n}: frozen single-batch map differs from training map"
    );
    assert!(rel_err(&same.logdet(), &train_fwd.logdet()) < 1e-12);
    let back = single.inverse(&train_fwd.z).unwrap();
    let err = back.sub(&batch).unwrap().max_abs();
    assert!(err < ROUND_TRIP, "{variant} n={n} train: round trip {err:e}");
    let ld = logdet_error(&single, &batch, 6);
    assert!(ld < LOGDET_REL, "{variant} n={n} train: log-det rel err {ld:e}");

    // Evaluation mode: statistics averaged over several batches, tested on
    // unseen rows.
    let batches: Vec<Matrix> = (0..4).map(|_| gaussian(4 * n + 8, n, &mut rng)).collect();
    model.freeze_statistics(&batches).unwrap();
    assert!(model.is_frozen());
    let fresh = gaussian(50, n, &mut rng).scale(1.5);
    let z = model.forward_frozen(&fresh).unwrap().z;
    let err = model.inverse(&z).unwrap().sub(&fresh).unwrap().max_abs();
    assert!(err < ROUND_TRIP, "{variant} n={n} eval: round trip {err:e}");
    let ld = logdet_error(&model, &fresh, 6);
    assert!(ld < LOGDET_REL, "{variant} n={n} eval: log-det rel err {ld:e}");
}

#[test]
fn every_variant_and_mode_in_two_to_four_dims() {
    for n in 2..=4 {
        for v in Variant::ALL {
            check_variant(v, n, 17 + n as u64);
        }
    }
}

#[test]
fn composed_logdet_is_sum_of_parts() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = gaussian(20, 3, &mut rng);
    let mut m = random_model(Variant::BaselineBnR, 3, 9);
    m.freeze_statistics(&[x.clone()]).unwrap();
    let f = m.forward_frozen(&x).unwrap();
    let (_, flow_ld) = m.flow.forward(&x).unwrap();
    let h = m.block_inputs(&x).unwrap();
    let (_, block_ld) = m.block.as_ref().unwrap().forward_frozen(&h).unwrap();
    for r in 0..x.rows() {
        // Householder reflections have |det| = 1, so the tail adds nothing.
        assert_eq!(f.logdet()[r], flow_ld[r] + block_ld[r]);
    }
}

#[test]
fn zero_initialized_couplings_are_the_identity() {
    let spec = ModelSpec::new(Variant::Baseline, 4);
    let m = build_variant(&spec).unwrap();
    let x = gaussian(10, 4, &mut ChaCha8Rng::seed_from_u64(1));
    let (z, ld) = m.flow.forward(&x).unwrap();
    // Even depth: the column reversals cancel.
    assert_eq!(z, x);
    assert!(ld.iter().all(|v| *v == 0.0));
}

/// Gradient of the training objective with batch statistics held at their
/// current values, against finite differences of the frozen single-batch map.
#[test]
fn objective_gradient_with_statistics_held_fixed() {
    for variant in [Variant::Baseline, Variant::BaselineBnR, Variant::NeuralPca] {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let x = gaussian(24, 3, &mut rng);
        let mut model = random_model(variant, 3, 4);
        let mut tape = Tape::new();
        let params: Vec<Matrix> = model.params().into_iter().cloned().collect();
        let vars = register_params(&mut tape, &params.iter().collect::<Vec<_>>());
        let xv = tape.constant(x.clone());
        let out = model
            .forward_tape(&mut tape, &vars, xv, GradientStop::Statistics)
            .unwrap();
        let base = model.base.clone();
        let obj = objective(&mut tape, out.z, out.logdet_flow, out.logdet_block, &base).unwrap();
        let mut grads = tape.backward(obj).unwrap();

        let mut frozen = model.clone();
        frozen.freeze_statistics(&[x.clone()]).unwrap();
        let value = |m: &NeuralPcaModel| {
            let f = m.forward_frozen(&x).unwrap();
            objective_value(&f.z, &f.logdet(), &m.base).unwrap()
        };
        let h = 1e-6;
        for (k, v) in vars.iter().enumerate() {
            let analytic = grads.take(*v);
            let len = params[k].as_slice().len();
            let numeric: Vec<f64> = (0..len)
                .map(|e| {
                    let mut p = frozen.clone();
                    p.params_mut()[k].as_mut_slice()[e] += h;
                    let mut q = frozen.clone();
                    q.params_mut()[k].as_mut_slice()[e] -= h;
                    (value(&p) - value(&q)) / (2.0 * h)
                })
                .collect();
            let err = rel_err(analytic.as_slice(), &numeric);
            assert!(err < 1e-5, "{variant} param {k}: relative error {err:e}");
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn random_models_invert(seed in any::<u64>(), n in 2usize..5, v in 0usize..7) {
        let variant = Variant::ALL[v];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut m = random_model(variant, n, seed);
        let batches: Vec<Matrix> = (0..3).map(|_| gaussian(3 * n + 5, n, &mut rng)).collect();
        m.freeze_statistics(&batches).unwrap();
        let x = gaussian(100, n, &mut rng);
        let z = m.forward_frozen(&x).unwrap().z;
        let err = m.inverse(&z).unwrap().sub(&x).unwrap().max_abs();
        prop_assert!(err < ROUND_TRIP, "round trip {err:e}");
    }
}
