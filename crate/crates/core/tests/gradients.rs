//! Reverse-mode gradients against central finite differences.

mod common;

use common::{gaussian, rel_err};
use neural_pca::autodiff::{Tape, Var};
use neural_pca::{Matrix, Result};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const H: f64 = 1e-6;
const TOL: f64 = 1e-5;

type Build = dyn Fn(&mut Tape, &[Var]) -> Result<Var>;

/// Fixed, position-dependent weights so that every output entry matters.
fn weights(rows: usize, cols: usize) -> Matrix {
    let data = (0..rows * cols)
        .map(|k| (1.0 + 0.37 * k as f64).sin() + 0.1)
        .collect();
    Matrix::from_vec(rows, cols, data).unwrap()
}

fn loss(inputs: &[Matrix], build: &Build) -> (Tape, Vec<Var>, Var) {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|m| tape.param(m.clone())).collect();
    let y = build(&mut tape, &vars).unwrap();
    let (r, c) = tape.value(y).shape();
    let w = tape.constant(weights(r, c));
    let p = tape.mul(y, w).unwrap();
    let l = tape.sum(p);
    (tape, vars, l)
}

/// Largest relative error over inputs between tape and central-difference
/// gradients of `sum(W ⊙ build(inputs))`.
fn gradient_error(inputs: &[Matrix], build: &Build) -> f64 {
    let (mut tape, vars, l) = loss(inputs, build);
    let mut grads = tape.backward(l).unwrap();
    let mut worst: f64 = 0.0;
    for (k, v) in vars.iter().enumerate() {
        let analytic = grads.take(*v);
        let mut numeric = vec![0.0; inputs[k].as_slice().len()];
        for (e, slot) in numeric.iter_mut().enumerate() {
            let mut plus = inputs.to_vec();
            let mut minus = inputs.to_vec();
            plus[k].as_mut_slice()[e] += H;
            minus[k].as_mut_slice()[e] -= H;
            let (tp, _, lp) = loss(&plus, build);
            let (tm, _, lm) = loss(&minus, build);
            *slot = (tp.value(lp).item() - tm.value(lm).item()) / (2.0 * H);
        }
        worst = worst.max(rel_err(analytic.as_slice(), &numeric));
    }
    worst
}

fn rng() -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(2024)
}

/// Entries pushed at least `margin` away from zero, keeping sign.
fn away_from_zero(m: &Matrix, margin: f64) -> Matrix {
    m.map(|v| if v >= 0.0 { v + margin } else { v - margin })
}

macro_rules! unary {
    ($name:ident, $input:expr, $op:expr) => {
        #[test]
        fn $name() {
            let x: Matrix = $input;
            let err = gradient_error(&[x], &|t: &mut Tape, v: &[Var]| Ok($op(t, v[0])));
            assert!(err < TOL, "relative error {err:e}");
        }
    };
}

unary!(tanh, gaussian(4, 3, &mut rng()), |t: &mut Tape, a| t.tanh(a));
unary!(softplus, gaussian(4, 3, &mut rng()).scale(3.0), |t: &mut Tape, a| t.softplus(a));
unary!(exp, gaussian(4, 3, &mut rng()), |t: &mut Tape, a| t.exp(a));
unary!(square, gaussian(4, 3, &mut rng()), |t: &mut Tape, a| t.square(a));
unary!(neg, gaussian(4, 3, &mut rng()), |t: &mut Tape, a| t.neg(a));
unary!(scale, gaussian(4, 3, &mut rng()), |t: &mut Tape, a| t.scale(a, -2.5));
unary!(add_scalar, gaussian(4, 3, &mut rng()), |t: &mut Tape, a| t.add_scalar(a, 0.7));
unary!(sum, gaussian(4, 3, &mut rng()), |t: &mut Tape, a| t.sum(a));
unary!(mean, gaussian(4, 3, &mut rng()), |t: &mut Tape, a| t.mean(a));
unary!(row_sums, gaussian(4, 3, &mut rng()), |t: &mut Tape, a| t.row_sums(a));
unary!(log_softmax, gaussian(4, 5, &mut rng()).scale(2.0), |t: &mut Tape, a| t.log_softmax(a));
// Kinks excluded: every entry is at least 0.05 from zero.
unary!(relu, away_from_zero(&gaussian(4, 3, &mut rng()), 0.05), |t: &mut Tape, a| t.relu(a));

#[test]
fn log() {
    let x = gaussian(3, 3, &mut rng()).map(|v| v.abs() + 0.2);
    let err = gradient_error(&[x], &|t, v| t.log(v[0]));
    assert!(err < TOL, "relative error {err:e}");
}

#[test]
fn binary_elementwise() {
    let mut r = rng();
    let (a, b) = (gaussian(3, 4, &mut r), gaussian(3, 4, &mut r));
    for (name, op) in [
        ("add", Tape::add as fn(&mut Tape, Var, Var) -> Result<Var>),
        ("sub", Tape::sub),
        ("mul", Tape::mul),
    ] {
        let err = gradient_error(&[a.clone(), b.clone()], &move |t, v| op(t, v[0], v[1]));
        assert!(err < TOL, "{name}: relative error {err:e}");
    }
}

#[test]
fn matmul() {
    let mut r = rng();
    let (a, b) = (gaussian(3, 4, &mut r), gaussian(4, 2, &mut r));
    let err = gradient_error(&[a, b], &|t, v| t.matmul(v[0], v[1]));
    assert!(err < TOL, "relative error {err:e}");
}

#[test]
fn row_broadcasts() {
    let mut r = rng();
    let (a, row) = (gaussian(5, 3, &mut r), gaussian(1, 3, &mut r));
    let err = gradient_error(&[a.clone(), row.clone()], &|t, v| t.add_row(v[0], v[1]));
    assert!(err < TOL, "add_row: {err:e}");
    let err = gradient_error(&[a, row], &|t, v| t.mul_row(v[0], v[1]));
    assert!(err < TOL, "mul_row: {err:e}");
}

#[test]
fn column_plumbing() {
    let mut r = rng();
    let (a, b) = (gaussian(3, 5, &mut r), gaussian(3, 2, &mut r));
    let err = gradient_error(&[a.clone()], &|t, v| t.slice_cols(v[0], 1, 4));
    assert!(err < TOL, "slice_cols: {err:e}");
    let err = gradient_error(&[a.clone(), b], &|t, v| t.concat_cols(&[v[1], v[0], v[1]]));
    assert!(err < TOL, "concat_cols: {err:e}");
    let err = gradient_error(&[a], &|t, v| t.permute_cols(v[0], &[3, 0, 4, 2, 1]));
    assert!(err < TOL, "permute_cols: {err:e}");
}

#[test]
fn householder_reflection() {
    let mut r = rng();
    let (x, v) = (gaussian(4, 3, &mut r), gaussian(1, 3, &mut r));
    let err = gradient_error(&[x, v], &|t, v| t.householder(v[0], v[1]));
    assert!(err < TOL, "relative error {err:e}");
}

#[test]
fn stop_gradient_paths_are_exactly_zero() {
    let mut r = rng();
    let (a, b) = (gaussian(3, 3, &mut r), gaussian(3, 3, &mut r));
    let mut tape = Tape::new();
    let (va, vb) = (tape.param(a.clone()), tape.param(b.clone()));
    let sa = tape.stop_gradient(va);
    let y = tape.mul(sa, vb).unwrap();
    let e = tape.exp(sa);
    let y = tape.add(y, e).unwrap();
    let l = tape.sum(y);
    let g = tape.backward(l).unwrap();
    assert!(g.get(va).as_slice().iter().all(|v| *v == 0.0));
    assert_eq!(g.get(vb), a);

    // A parameter reached both directly and through a stop: only the direct
    // path contributes.
    let mut tape = Tape::new();
    let va = tape.param(a.clone());
    let sa = tape.stop_gradient(va);
    let sq = tape.square(sa);
    let y = tape.add(sq, va).unwrap();
    let l = tape.sum(y);
    let g = tape.backward(l).unwrap();
    assert!(g.get(va).as_slice().iter().all(|v| *v == 1.0));
}

#[test]
fn deep_composition() {
    let mut r = rng();
    let (x, w1, w2, b) = (gaussian(6, 3, &mut r), gaussian(3, 5, &mut r), gaussian(5, 2, &mut r), gaussian(1, 5, &mut r));
    let err = gradient_error(&[x, w1, w2, b], &|t, v| {
        let h = t.matmul(v[0], v[1])?;
        let h = t.add_row(h, v[3])?;
        let h = t.tanh(h);
        let o = t.matmul(h, v[2])?;
        let s = t.softplus(o);
        Ok(t.log_softmax(s))
    });
    assert!(err < TOL, "relative error {err:e}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn smooth_unary_ops_on_random_inputs(
        rows in 1usize..5,
        cols in 1usize..5,
        seed in any::<u64>(),
        op in 0usize..5,
    ) {
        let x = gaussian(rows, cols, &mut ChaCha8Rng::seed_from_u64(seed));
        let build: &Build = match op {
            0 => &|t, v| Ok(t.tanh(v[0])),
            1 => &|t, v| Ok(t.softplus(v[0])),
            2 => &|t, v| Ok(t.exp(v[0])),
            3 => &|t, v| Ok(t.square(v[0])),
            _ => &|t, v| Ok(t.log_softmax(v[0])),
        };
        let err = gradient_error(&[x], build);
        prop_assert!(err < TOL, "op {op}: relative error {err:e}");
    }

    #[test]
    fn matmul_on_random_shapes(m in 1usize..5, k in 1usize..5, n in 1usize..5, seed in any::<u64>()) {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let (a, b) = (gaussian(m, k, &mut r), gaussian(k, n, &mut r));
        let err = gradient_error(&[a, b], &|t, v| t.matmul(v[0], v[1]));
        prop_assert!(err < TOL, "relative error {err:e}");
    }
}
