//! Maximum-likelihood training loop with per-batch block statistics, periodic
//! validation, and the final statistics pass that freezes the block.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{cosine_lr, register_params, AdamConfig, AdamState, StepOutcome, Tape, Var};
use crate::density::BaseDensity;
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::model::NeuralPcaModel;
use crate::pca_block::{BlockStats, GradientStop};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LrSchedule {
    Constant,
    /// Cosine annealing to zero over the iteration budget.
    Cosine,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub iterations: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub schedule: LrSchedule,
    pub adam: AdamConfig,
    pub gradient_stop: GradientStop,
    /// Validation interval in iterations; 0 disables validation.
    pub eval_every: usize,
    /// Consecutive skipped iterations after which training aborts.
    pub max_consecutive_skips: usize,
    /// Number of batches in the statistics pass; `None` means one pass over
    /// the training set.
    pub stats_batches: Option<usize>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            iterations: 10_000,
            batch_size: 100,
            lr: 5e-4,
            schedule: LrSchedule::Cosine,
            adam: AdamConfig::default(),
            gradient_stop: GradientStop::default(),
            eval_every: 500,
            max_consecutive_skips: 50,
            stats_batches: None,
            seed: 0,
        }
    }
}

/// One row per completed epoch (and one for a trailing partial epoch).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub epoch: usize,
    pub iteration: usize,
    /// Mean training NLL in nats per sample over the epoch's iterations.
    pub train_nll: f64,
    /// Most recent validation NLL, when one was computed during the epoch.
    pub val_nll: Option<f64>,
    pub lr: f64,
    pub skipped: usize,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: NeuralPcaModel,
    pub metrics: Vec<MetricsRow>,
    /// Objective value of every applied iteration.
    pub objective_trace: Vec<f64>,
    /// Iteration of the restored best-validation parameters, if any.
    pub best_iteration: Option<usize>,
    pub best_val_nll: Option<f64>,
    pub stats: Option<BlockStats>,
    pub skipped: usize,
    pub warnings: Vec<String>,
}

/// `mean_b [log p_Z(z_b) + logdet_h,b + logdet_bn,b]` on a tape.
///
/// The normalization log-det enters as given; the block decides which of its
/// parts carry gradient.
pub fn objective(
    tape: &mut Tape,
    z: Var,
    logdet_h: Option<Var>,
    logdet_bn: Option<Var>,
    base: &BaseDensity,
) -> Result<Var> {
    let mut per_sample = base.log_prob_tape(tape, z)?;
    for ld in [logdet_h, logdet_bn].into_iter().flatten() {
        per_sample = tape.add(per_sample, ld)?;
    }
    Ok(tape.mean(per_sample))
}

/// Numeric counterpart of [`objective`].
pub fn objective_value(z: &Matrix, logdet: &[f64], base: &BaseDensity) -> Result<f64> {
    let lp = base.log_prob(z)?;
    if lp.len() != logdet.len() {
        return Err(Error::Shape(format!(
            "{} latents vs {} log-dets",
            lp.len(),
            logdet.len()
        )));
    }
    Ok(lp.iter().zip(logdet).map(|(a, b)| a + b).sum::<f64>() / lp.len() as f64)
}

fn is_numerical(e: &Error) -> bool {
    matches!(
        e,
        Error::NonFinite(_) | Error::Decomposition(_) | Error::Degenerate(_)
    )
}

/// Splits shuffled rows into full batches of `b`.
fn shuffled_batches(rows: usize, b: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..rows).collect();
    idx.shuffle(rng);
    idx.chunks_exact(b).map(<[usize]>::to_vec).collect()
}

/// Mean NLL over `x` evaluated in batches with their own statistics.
pub fn batch_stats_nll(model: &NeuralPcaModel, x: &Matrix, batch_size: usize) -> Result<f64> {
    let min_rows = if model.block.is_some() { model.dim().max(2) } else { 1 };
    let idx: Vec<usize> = (0..x.rows()).collect();
    let mut total = 0.0;
    let mut count = 0usize;
    for chunk in idx.chunks(batch_size.max(1)) {
        if chunk.len() < min_rows {
            continue;
        }
        let xb = x.select_rows(chunk);
        let f = model.forward_batch_stats(&xb)?;
        let lp = model.base.log_prob(&f.z)?;
        total -= lp.iter().zip(f.logdet()).map(|(a, b)| a + b).sum::<f64>();
        count += chunk.len();
    }
    if count == 0 {
        return Err(Error::InsufficientBatch(format!(
            "no validation batch with at least {min_rows} rows"
        )));
    }
    Ok(total / count as f64)
}

fn check_config(model: &NeuralPcaModel, cfg: &TrainConfig, train: &Matrix) -> Result<()> {
    if train.cols() != model.dim() {
        return Err(Error::Shape(format!(
            "model of dim {} given data with {} columns",
            model.dim(),
            train.cols()
        )));
    }
    if cfg.batch_size < 2 && model.block.is_some() {
        return Err(Error::InsufficientBatch("batch normalization needs batches of at least 2".into()));
    }
    if model.block.as_ref().is_some_and(|b| b.rotate) && cfg.batch_size < model.dim() {
        return Err(Error::InsufficientBatch(format!(
            "pca layer needs batch size >= {}, got {}",
            model.dim(),
            cfg.batch_size
        )));
    }
    if cfg.batch_size == 0 || train.rows() < cfg.batch_size {
        return Err(Error::InsufficientBatch(format!(
            "{} training rows cannot fill a batch of {}",
            train.rows(),
            cfg.batch_size
        )));
    }
    if !(cfg.lr.is_finite() && cfg.lr >= 0.0) {
        return Err(Error::InvalidArgument(format!("learning rate {}", cfg.lr)));
    }
    Ok(())
}

/// Runs one optimization step; `Ok(None)` means the step was skipped.
fn step(
    model: &mut NeuralPcaModel,
    adam: &mut AdamState,
    cfg: &TrainConfig,
    lr: f64,
    xb: Matrix,
) -> Result<Option<f64>> {
    let mut tape = Tape::new();
    let vars = register_params(&mut tape, &model.params());
    let x = tape.constant(xb);
    let fwd = match model.forward_tape(&mut tape, &vars, x, cfg.gradient_stop) {
        Ok(f) => f,
        Err(e) if is_numerical(&e) => return Ok(None),
        Err(e) => return Err(e),
    };
    let j = objective(&mut tape, fwd.z, fwd.logdet_flow, fwd.logdet_block, &model.base)?;
    let jv = tape.value(j).item();
    if !jv.is_finite() {
        return Ok(None);
    }
    let loss = tape.neg(j);
    let mut grads = tape.backward(loss)?;
    let g: Vec<Matrix> = vars.iter().map(|v| grads.take(*v)).collect();
    let mut params = model.params_mut();
    match adam.step(&cfg.adam, lr, &mut params, &g)? {
        StepOutcome::Applied => Ok(Some(jv)),
        StepOutcome::SkippedNonFinite => Ok(None),
    }
}

/// Trains `model` on the rows of `train`, restores the best-validation
/// parameters when `val` is given, and freezes the block statistics.
pub fn train(
    mut model: NeuralPcaModel,
    cfg: &TrainConfig,
    train: &Matrix,
    val: Option<&Matrix>,
) -> Result<TrainOutcome> {
    check_config(&model, cfg, train)?;
    model.set_train_mode();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = AdamState::new(model.params().iter().map(|p| p.shape()));

    let mut metrics = Vec::new();
    let mut trace = Vec::with_capacity(cfg.iterations);
    let mut warnings = Vec::new();
    let mut best: Option<(f64, usize, NeuralPcaModel)> = None;
    let mut skipped_total = 0usize;
    let mut consecutive = 0usize;
    let mut iteration = 0usize;
    let mut epoch = 0usize;
    let mut last_val = None;

    while iteration < cfg.iterations {
        let batches = shuffled_batches(train.rows(), cfg.batch_size, &mut rng);
        let (mut sum, mut applied, mut skipped) = (0.0, 0usize, 0usize);
        let mut epoch_val = None;
        let mut lr = cfg.lr;
        for idx in batches {
            if iteration >= cfg.iterations {
                break;
            }
            lr = match cfg.schedule {
                LrSchedule::Constant => cfg.lr,
                LrSchedule::Cosine => cosine_lr(cfg.lr, iteration, cfg.iterations),
            };
            match step(&mut model, &mut adam, cfg, lr, train.select_rows(&idx))? {
                Some(j) => {
                    consecutive = 0;
                    sum -= j;
                    applied += 1;
                    trace.push(j);
                }
                None => {
                    consecutive += 1;
                    skipped += 1;
                    skipped_total += 1;
                    warnings.push(format!("iteration {iteration}: non-finite objective or gradient, skipped"));
                    if consecutive >= cfg.max_consecutive_skips {
                        return Err(Error::Aborted(format!(
                            "{consecutive} consecutive non-finite iterations at iteration {iteration}"
                        )));
                    }
                }
            }
            iteration += 1;

            let due = cfg.eval_every > 0
                && (iteration % cfg.eval_every == 0 || iteration == cfg.iterations);
            if let (true, Some(v)) = (due, val) {
                match batch_stats_nll(&model, v, cfg.batch_size) {
                    Ok(nll) if nll.is_finite() => {
                        epoch_val = Some(nll);
                        last_val = Some(nll);
                        if best.as_ref().is_none_or(|(b, _, _)| nll < *b) {
                            best = Some((nll, iteration, model.clone()));
                        }
                    }
                    Ok(_) => warnings.push(format!("iteration {iteration}: non-finite validation NLL")),
                    Err(e) if is_numerical(&e) => {
                        warnings.push(format!("iteration {iteration}: validation failed: {e}"))
                    }
                    Err(e) => return Err(e),
                }
            }
        }
        if applied + skipped > 0 {
            metrics.push(MetricsRow {
                epoch,
                iteration,
                train_nll: if applied > 0 { sum / applied as f64 } else { f64::NAN },
                val_nll: epoch_val,
                lr,
                skipped,
            });
        }
        epoch += 1;
    }

    let (best_iteration, best_val_nll) = match best {
        Some((nll, it, snapshot)) => {
            let improved = last_val.is_none_or(|l| nll < l);
            if improved {
                model = snapshot;
            }
            (Some(it), Some(nll))
        }
        None => (None, None),
    };

    let stats = freeze(&mut model, cfg, train, &mut rng)?;
    Ok(TrainOutcome {
        model,
        metrics,
        objective_trace: trace,
        best_iteration,
        best_val_nll,
        stats,
        skipped: skipped_total,
        warnings,
    })
}

/// The statistics pass: shuffled full batches of the training data.
pub fn freeze(
    model: &mut NeuralPcaModel,
    cfg: &TrainConfig,
    train: &Matrix,
    rng: &mut ChaCha8Rng,
) -> Result<Option<BlockStats>> {
    if model.block.is_none() {
        return Ok(None);
    }
    let mut batches = shuffled_batches(train.rows(), cfg.batch_size, rng);
    if let Some(m) = cfg.stats_batches {
        batches.truncate(m.max(1));
    }
    let xs: Vec<Matrix> = batches.iter().map(|i| train.select_rows(i)).collect();
    model.freeze_statistics(&xs)
}
