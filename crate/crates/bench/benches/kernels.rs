use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};
use neural_pca::data::two_spiral;
use neural_pca::linalg::{project_to_son, svd_full};
use neural_pca::{build_variant, train, Matrix, ModelSpec, Split, TrainConfig, Variant};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

fn gaussian(rows: usize, cols: usize, seed: u64) -> Matrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..rows * cols).map(|_| StandardNormal.sample(&mut rng)).collect();
    Matrix::from_vec(rows, cols, data).unwrap()
}

fn svd(c: &mut Criterion) {
    let mut g = c.benchmark_group("svd_full");
    for n in [2, 16, 64, 256] {
        let a = gaussian(n, n, n as u64);
        g.bench_with_input(BenchmarkId::from_parameter(n), &a, |b, a| b.iter(|| svd_full(black_box(a)).unwrap()));
    }
    g.finish();
}

fn son(c: &mut Criterion) {
    let mut g = c.benchmark_group("project_to_son");
    for n in [3, 16, 64] {
        let a = gaussian(n, n, 7);
        g.bench_with_input(BenchmarkId::from_parameter(n), &a, |b, a| b.iter(|| project_to_son(black_box(a)).unwrap()));
    }
    g.finish();
}

/// Ten optimizer steps on Two-Spiral at the default architecture, including
/// the closing statistics pass.
fn training(c: &mut Criterion) {
    let ds = two_spiral(2000, 0.02, 1.75, 0).unwrap();
    let x = ds.split_x(Split::Train);
    let cfg = TrainConfig { iterations: 10, eval_every: 0, stats_batches: Some(4), ..TrainConfig::default() };
    let mut g = c.benchmark_group("train_10_steps");
    g.sample_size(20);
    for variant in [Variant::Baseline, Variant::NeuralPca] {
        let model = build_variant(&ModelSpec::new(variant, 2)).unwrap();
        g.bench_function(variant.name(), |b| b.iter(|| train(model.clone(), &cfg, &x, None).unwrap()));
    }
    g.finish();
}

criterion_group!(benches, svd, son, training);
criterion_main!(benches);
