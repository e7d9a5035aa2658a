use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{register_params, Activation, AdamConfig, AdamState, Mlp, Tape};
use crate::error::{Error, Result};
use crate::linalg::Matrix;

/// Features with labels in `0..n_classes`.
#[derive(Debug, Clone, Copy)]
pub struct Labeled<'a> {
    pub x: &'a Matrix,
    pub y: &'a [usize],
}

impl<'a> Labeled<'a> {
    pub fn new(x: &'a Matrix, y: &'a [usize]) -> Self {
        Labeled { x, y }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierReport {
    pub test_accuracy: f64,
    pub val_accuracy: f64,
    /// Epoch (1-based) whose parameters produced the reported accuracies.
    pub best_epoch: usize,
}

fn validate(splits: [Labeled<'_>; 3], n_classes: usize) -> Result<usize> {
    let d = splits[0].x.cols();
    for (name, s) in ["train", "val", "test"].iter().zip(&splits) {
        if s.x.rows() != s.y.len() {
            return Err(Error::Shape(format!(
                "{name}: {} rows but {} labels",
                s.x.rows(),
                s.y.len()
            )));
        }
        if s.x.cols() != d {
            return Err(Error::Shape(format!(
                "{name}: {} features, train has {d}",
                s.x.cols()
            )));
        }
        if let Some(bad) = s.y.iter().find(|&&l| l >= n_classes) {
            return Err(Error::InvalidArgument(format!(
                "{name}: label {bad} outside 0..{n_classes}"
            )));
        }
        if s.x.rows() == 0 {
            return Err(Error::InvalidArgument(format!("{name} split is empty")));
        }
    }
    let first = splits[0].y[0];
    if splits[0].y.iter().all(|&l| l == first) {
        return Err(Error::InvalidArgument(
            "training set contains a single class".into(),
        ));
    }
    Ok(d)
}

pub fn accuracy(pred: &[usize], truth: &[usize]) -> f64 {
    let hits = pred.iter().zip(truth).filter(|(a, b)| a == b).count();
    hits as f64 / truth.len().max(1) as f64
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MlpClassifierConfig {
    pub hidden: usize,
    pub dropout: f64,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for MlpClassifierConfig {
    fn default() -> Self {
        MlpClassifierConfig {
            hidden: 200,
            dropout: 0.2,
            epochs: 100,
            lr: 1e-3,
            batch_size: 128,
            seed: 0,
        }
    }
}

/// `d → hidden → ReLU → dropout → n_classes` trained with cross-entropy;
/// the reported epoch is the one with the best validation accuracy.
pub fn mlp_classify(
    train: Labeled<'_>,
    val: Labeled<'_>,
    test: Labeled<'_>,
    n_classes: usize,
    cfg: &MlpClassifierConfig,
) -> Result<ClassifierReport> {
    let d = validate([train, val, test], n_classes)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut net = Mlp::new(&[d, cfg.hidden, n_classes], Activation::Relu, false, &mut rng);
    let adam_cfg = AdamConfig {
        lr: cfg.lr,
        ..AdamConfig::default()
    };
    let mut adam = AdamState::new(net.params().iter().map(|p| p.shape()));
    let predict = |net: &Mlp, x: &Matrix| -> Result<Vec<usize>> {
        let out = net.forward(x)?;
        Ok((0..out.rows()).map(|r| argmax(out.row(r))).collect())
    };

    let mut best = ClassifierReport {
        test_accuracy: 0.0,
        val_accuracy: -1.0,
        best_epoch: 0,
    };
    let mut order: Vec<usize> = (0..train.x.rows()).collect();
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size.max(1)) {
            let xb = train.x.select_rows(chunk);
            let mut onehot = Matrix::zeros(chunk.len(), n_classes);
            for (r, &i) in chunk.iter().enumerate() {
                onehot[(r, train.y[i])] = 1.0;
            }
            let mut tape = Tape::new();
            let vars = register_params(&mut tape, &net.params());
            let x = tape.constant(xb);
            let logits = net.forward_tape(&mut tape, &vars, x, Some((cfg.dropout, &mut rng)))?;
            let logp = tape.log_softmax(logits);
            let t = tape.constant(onehot);
            let picked = tape.mul(logp, t)?;
            let total = tape.sum(picked);
            let loss = tape.scale(total, -1.0 / chunk.len() as f64);
            let mut grads = tape.backward(loss)?;
            let g: Vec<Matrix> = vars.iter().map(|v| grads.take(*v)).collect();
            adam.step(&adam_cfg, cfg.lr, &mut net.params_mut(), &g)?;
        }
        let va = accuracy(&predict(&net, val.x)?, val.y);
        if va > best.val_accuracy {
            best = ClassifierReport {
                test_accuracy: accuracy(&predict(&net, test.x)?, test.y),
                val_accuracy: va,
                best_epoch: epoch,
            };
        }
    }
    if cfg.epochs == 0 {
        best.val_accuracy = accuracy(&predict(&net, val.x)?, val.y);
        best.test_accuracy = accuracy(&predict(&net, test.x)?, test.y);
    }
    Ok(best)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SvmConfig {
    pub lambda: f64,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for SvmConfig {
    fn default() -> Self {
        SvmConfig {
            lambda: 1e-4,
            epochs: 200,
            seed: 0,
        }
    }
}

/// One-vs-rest linear classifier in the original feature coordinates:
/// `score_c(x) = x · weights[c] + bias[c]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearSvm {
    pub weights: Vec<Vec<f64>>,
    pub bias: Vec<f64>,
}

impl LinearSvm {
    pub fn scores(&self, x: &[f64]) -> Vec<f64> {
        self.weights
            .iter()
            .zip(&self.bias)
            .map(|(w, b)| w.iter().zip(x).map(|(a, c)| a * c).sum::<f64>() + b)
            .collect()
    }

    /// With a single weight vector (binary case) the sign picks class 1.
    pub fn predict(&self, x: &Matrix) -> Vec<usize> {
        (0..x.rows())
            .map(|r| {
                let s = self.scores(x.row(r));
                if s.len() == 1 {
                    usize::from(s[0] > 0.0)
                } else {
                    argmax(&s)
                }
            })
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct SvmReport {
    pub report: ClassifierReport,
    pub model: LinearSvm,
}

/// Per-feature standardization fitted on the training split.
fn standardizer(x: &Matrix) -> (Vec<f64>, Vec<f64>) {
    let mean = x.column_means();
    let sd = x
        .column_variances()
        .into_iter()
        .map(|v| if v > 1e-24 { v.sqrt() } else { 1.0 })
        .collect();
    (mean, sd)
}

/// Pegasos on standardized features with an appended constant feature for
/// the bias; one binary problem per class (a single one for two classes).
/// The epoch with the best validation accuracy is kept.
pub fn linear_svm_classify(
    train: Labeled<'_>,
    val: Labeled<'_>,
    test: Labeled<'_>,
    n_classes: usize,
    cfg: &SvmConfig,
) -> Result<SvmReport> {
    let d = validate([train, val, test], n_classes)?;
    if !(cfg.lambda > 0.0) {
        return Err(Error::InvalidArgument(format!("svm lambda {}", cfg.lambda)));
    }
    let (mean, sd) = standardizer(train.x);
    let n = train.x.rows();
    let mut feats = vec![0.0; n * (d + 1)];
    for r in 0..n {
        let row = &mut feats[r * (d + 1)..(r + 1) * (d + 1)];
        for j in 0..d {
            row[j] = (train.x[(r, j)] - mean[j]) / sd[j];
        }
        row[d] = 1.0;
    }
    let problems = if n_classes == 2 { 1 } else { n_classes };
    let target = |p: usize, label: usize| -> f64 {
        let positive = if problems == 1 { label == 1 } else { label == p };
        if positive {
            1.0
        } else {
            -1.0
        }
    };
    let to_model = |w: &[Vec<f64>]| -> LinearSvm {
        let weights: Vec<Vec<f64>> = w
            .iter()
            .map(|wp| (0..d).map(|j| wp[j] / sd[j]).collect())
            .collect();
        let bias = w
            .iter()
            .map(|wp| wp[d] - (0..d).map(|j| wp[j] * mean[j] / sd[j]).sum::<f64>())
            .collect();
        LinearSvm { weights, bias }
    };

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut w = vec![vec![0.0; d + 1]; problems];
    let mut t = 0u64;
    let mut order: Vec<usize> = (0..n).collect();
    let radius = 1.0 / cfg.lambda.sqrt();
    let mut best: Option<(ClassifierReport, LinearSvm)> = None;
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        for &i in &order {
            t += 1;
            let eta = 1.0 / (cfg.lambda * t as f64);
            let xi = &feats[i * (d + 1)..(i + 1) * (d + 1)];
            for (p, wp) in w.iter_mut().enumerate() {
                let y = target(p, train.y[i]);
                let margin = y * wp.iter().zip(xi).map(|(a, b)| a * b).sum::<f64>();
                let shrink = 1.0 - eta * cfg.lambda;
                wp.iter_mut().for_each(|v| *v *= shrink);
                if margin < 1.0 {
                    wp.iter_mut().zip(xi).for_each(|(v, x)| *v += eta * y * x);
                }
                let norm = wp.iter().map(|v| v * v).sum::<f64>().sqrt();
                if norm > radius {
                    wp.iter_mut().for_each(|v| *v *= radius / norm);
                }
            }
        }
        let model = to_model(&w);
        let va = accuracy(&model.predict(val.x), val.y);
        if best.as_ref().is_none_or(|(b, _)| va > b.val_accuracy) {
            let report = ClassifierReport {
                test_accuracy: accuracy(&model.predict(test.x), test.y),
                val_accuracy: va,
                best_epoch: epoch,
            };
            best = Some((report, model));
        }
    }
    let (report, model) = match best {
        Some(b) => b,
        None => {
            let model = to_model(&w);
            let report = ClassifierReport {
                test_accuracy: accuracy(&model.predict(test.x), test.y),
                val_accuracy: accuracy(&model.predict(val.x), val.y),
                best_epoch: 0,
            };
            (report, model)
        }
    };
    Ok(SvmReport { report, model })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn blobs(n: usize, seed: u64, gap: f64) -> (Matrix, Vec<usize>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut x = Matrix::zeros(n, 2);
        let mut y = Vec::new();
        for r in 0..n {
            let c = r % 2;
            let off = if c == 0 { -gap } else { gap };
            x[(r, 0)] = off + rng.random_range(-1.0..1.0);
            x[(r, 1)] = rng.random_range(-1.0..1.0);
            y.push(c);
        }
        (x, y)
    }

    #[test]
    fn svm_threshold_data() {
        let x = Matrix::column_vector(&[-3.0, -2.0, -1.0, 1.0, 2.0, 3.0]);
        let y = [0, 0, 0, 1, 1, 1];
        let l = Labeled::new(&x, &y);
        let r = linear_svm_classify(l, l, l, 2, &SvmConfig::default()).unwrap();
        assert_eq!(r.report.test_accuracy, 1.0);
        let boundary = -r.model.bias[0] / r.model.weights[0][0];
        assert!(boundary > -1.0 && boundary < 1.0, "{boundary}");
    }

    #[test]
    fn svm_xor_is_at_most_three_quarters() {
        let x = Matrix::from_rows(&[
            vec![1.0, 1.0],
            vec![-1.0, -1.0],
            vec![1.0, -1.0],
            vec![-1.0, 1.0],
        ])
        .unwrap();
        let y = [0, 0, 1, 1];
        let l = Labeled::new(&x, &y);
        let r = linear_svm_classify(l, l, l, 2, &SvmConfig::default()).unwrap();
        assert!(r.report.test_accuracy <= 0.75);
    }

    #[test]
    fn mlp_separable_blobs() {
        let (x, y) = blobs(400, 1, 2.0);
        let (xt, yt) = blobs(200, 2, 2.0);
        let cfg = MlpClassifierConfig {
            epochs: 20,
            ..MlpClassifierConfig::default()
        };
        let r = mlp_classify(
            Labeled::new(&x, &y),
            Labeled::new(&xt, &yt),
            Labeled::new(&xt, &yt),
            2,
            &cfg,
        )
        .unwrap();
        assert!(r.test_accuracy >= 0.99);
    }

    #[test]
    fn single_class_is_rejected() {
        let x = Matrix::zeros(4, 2);
        let y = [1, 1, 1, 1];
        let l = Labeled::new(&x, &y);
        assert!(mlp_classify(l, l, l, 2, &MlpClassifierConfig::default()).is_err());
        assert!(linear_svm_classify(l, l, l, 2, &SvmConfig::default()).is_err());
    }

    #[test]
    fn multiclass_one_hot_features() {
        let n = 300;
        let mut x = Matrix::zeros(n, 3);
        let y: Vec<usize> = (0..n).map(|i| i % 3).collect();
        for (r, &c) in y.iter().enumerate() {
            x[(r, c)] = 1.0;
        }
        let l = Labeled::new(&x, &y);
        let svm = linear_svm_classify(l, l, l, 3, &SvmConfig::default()).unwrap();
        assert_eq!(svm.report.test_accuracy, 1.0);
        let cfg = MlpClassifierConfig {
            epochs: 10,
            ..MlpClassifierConfig::default()
        };
        assert_eq!(mlp_classify(l, l, l, 3, &cfg).unwrap().test_accuracy, 1.0);
    }
}
