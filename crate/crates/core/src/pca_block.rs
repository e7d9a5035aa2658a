//! Zero-offset batch normalization followed by a per-batch PCA rotation.
//!
//! In training mode both stages use the statistics of the current batch. After
//! training, [`PcaBlock::freeze`] averages those statistics over a pass of
//! batches and replaces the per-batch rotations by their mean rotation, after
//! which the block is a fixed affine bijection.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::flow::broadcast_rows;
use crate::linalg::{canonicalize_rotation, project_to_son, svd_full, Matrix};

pub const DEFAULT_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mode {
    Train,
    Eval,
}

/// Which parts of the block are excluded from differentiation.
///
/// In both modes the batch mean, variance and rotation are constants in the
/// backward pass; the data path carries gradient through them.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum GradientStop {
    /// Only the batch statistics are constant; the `Σ log α` term of the
    /// normalization log-det keeps its gradient.
    #[default]
    Statistics,
    /// The whole normalization log-det is a constant, so `α` receives
    /// gradient only through the latents.
    Full,
}

/// Averaged training statistics used in evaluation mode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockStats {
    pub mu_bar: Vec<f64>,
    /// Mean of the per-batch (biased) variances.
    pub sigma_bar: Vec<f64>,
    /// Mean rotation; absent when the block has no PCA layer.
    pub v_tilde: Option<Matrix>,
    /// The projection onto SO(n) was not unique.
    pub degenerate: bool,
    pub batches: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PcaBlock {
    /// `log α`, so that `α > 0` throughout training.
    pub log_alpha: Matrix,
    pub eps: f64,
    /// Whether the PCA layer follows the normalization.
    pub rotate: bool,
    pub mode: Mode,
    pub stats: Option<BlockStats>,
    /// Rotation of the most recent training batch.
    pub last_v: Option<Matrix>,
}

/// Per-column mean and biased variance.
pub fn batch_statistics(x: &Matrix) -> Result<(Vec<f64>, Vec<f64>)> {
    if x.rows() < 2 {
        return Err(Error::InsufficientBatch(format!(
            "batch normalization needs at least 2 rows, got {}",
            x.rows()
        )));
    }
    Ok((x.column_means(), x.column_variances()))
}

impl PcaBlock {
    /// `α = 1`, training mode.
    pub fn new(dim: usize, rotate: bool) -> Self {
        PcaBlock {
            log_alpha: Matrix::zeros(1, dim),
            eps: DEFAULT_EPS,
            rotate,
            mode: Mode::Train,
            stats: None,
            last_v: None,
        }
    }

    pub fn dim(&self) -> usize {
        self.log_alpha.cols()
    }

    pub fn alpha(&self) -> Vec<f64> {
        self.log_alpha.as_slice().iter().map(|l| l.exp()).collect()
    }

    pub fn param_count(&self) -> usize {
        self.dim()
    }

    fn check_cols(&self, x: &Matrix) -> Result<()> {
        if x.cols() != self.dim() {
            return Err(Error::Shape(format!(
                "block of dim {} given {} columns",
                self.dim(),
                x.cols()
            )));
        }
        Ok(())
    }

    fn frozen(&self) -> Result<&BlockStats> {
        self.stats
            .as_ref()
            .ok_or_else(|| Error::Usage("evaluation mode needs frozen statistics".into()))
    }

    /// The statistics that apply in the current mode.
    fn active_statistics(&self, x: &Matrix) -> Result<(Vec<f64>, Vec<f64>)> {
        match self.mode {
            Mode::Train => batch_statistics(x),
            Mode::Eval => {
                let s = self.frozen()?;
                Ok((s.mu_bar.clone(), s.sigma_bar.clone()))
            }
        }
    }

    /// `α (x − μ) / √(σ² + ε)` with the given statistics, and its per-sample
    /// log-det `Σ [log α − ½ log(σ² + ε)]`.
    pub fn normalize_with(&self, x: &Matrix, mean: &[f64], var: &[f64]) -> Result<(Matrix, Vec<f64>)> {
        self.check_cols(x)?;
        let alpha = self.alpha();
        let k: Vec<f64> = alpha
            .iter()
            .zip(var)
            .map(|(a, v)| a / (v + self.eps).sqrt())
            .collect();
        let mut z = x.clone();
        for r in 0..z.rows() {
            for ((v, m), ki) in z.row_mut(r).iter_mut().zip(mean).zip(&k) {
                *v = (*v - m) * ki;
            }
        }
        let ld: f64 = k.iter().map(|ki| ki.ln()).sum();
        Ok((z, vec![ld; x.rows()]))
    }

    /// Normalization stage in the current mode.
    pub fn bn_forward(&self, x: &Matrix) -> Result<(Matrix, Vec<f64>)> {
        self.check_cols(x)?;
        let (m, v) = self.active_statistics(x)?;
        self.normalize_with(x, &m, &v)
    }

    /// Sign-canonicalized rotation of a normalized training batch. Columns
    /// are aligned with `reference` when given.
    pub fn batch_rotation(z: &Matrix, reference: Option<&Matrix>) -> Result<Matrix> {
        if z.rows() < z.cols() {
            return Err(Error::InsufficientBatch(format!(
                "pca layer needs batch >= {} rows, got {}",
                z.cols(),
                z.rows()
            )));
        }
        let svd = svd_full(z)?;
        canonicalize_rotation(&svd.v(), reference)
    }

    /// PCA stage. In training mode this computes and caches the batch
    /// rotation; in evaluation mode it applies the mean rotation.
    pub fn pca_forward(&mut self, z: &Matrix) -> Result<Matrix> {
        self.check_cols(z)?;
        let v = self.current_rotation(z)?;
        if self.mode == Mode::Train {
            self.last_v = Some(v.clone());
        }
        z.matmul(&v)
    }

    fn current_rotation(&self, z: &Matrix) -> Result<Matrix> {
        match self.mode {
            Mode::Train => Self::batch_rotation(z, self.last_v.as_ref()),
            Mode::Eval => self
                .frozen()?
                .v_tilde
                .clone()
                .ok_or_else(|| Error::Usage("frozen statistics lack the mean rotation".into())),
        }
    }

    /// Both stages; the log-det is that of the normalization since rotations
    /// preserve volume.
    pub fn forward(&mut self, x: &Matrix) -> Result<(Matrix, Vec<f64>)> {
        let (z, ld) = self.bn_forward(x)?;
        if !self.rotate {
            return Ok((z, ld));
        }
        Ok((self.pca_forward(&z)?, ld))
    }

    /// Evaluation-mode forward without touching any cache.
    pub fn forward_frozen(&self, x: &Matrix) -> Result<(Matrix, Vec<f64>)> {
        if self.mode != Mode::Eval {
            return Err(Error::Usage("forward_frozen needs evaluation mode".into()));
        }
        let (z, ld) = self.bn_forward(x)?;
        if !self.rotate {
            return Ok((z, ld));
        }
        Ok((z.matmul(&self.current_rotation(&z)?)?, ld))
    }

    /// `((z Ṽᵀ) √(σ̄² + ε) / α) + μ̄`; evaluation mode only.
    pub fn inverse(&self, z: &Matrix) -> Result<Matrix> {
        if self.mode != Mode::Eval {
            return Err(Error::Usage("the block is invertible only in evaluation mode".into()));
        }
        self.check_cols(z)?;
        let s = self.frozen()?;
        let mut x = match (&s.v_tilde, self.rotate) {
            (Some(v), true) => z.matmul_nt(v)?,
            (None, true) => {
                return Err(Error::Usage("frozen statistics lack the mean rotation".into()))
            }
            (_, false) => z.clone(),
        };
        let alpha = self.alpha();
        for r in 0..x.rows() {
            for (j, v) in x.row_mut(r).iter_mut().enumerate() {
                *v = *v * (s.sigma_bar[j] + self.eps).sqrt() / alpha[j] + s.mu_bar[j];
            }
        }
        Ok(x)
    }

    /// Tape forward with `log_alpha` as the registered `log α`. Returns the
    /// latents and the `B × 1` normalization log-det. In training mode the
    /// batch rotation is cached as in [`PcaBlock::pca_forward`].
    pub fn forward_tape(
        &mut self,
        tape: &mut Tape,
        log_alpha: Var,
        x: Var,
        stop: GradientStop,
    ) -> Result<(Var, Var)> {
        let xv = tape.value(x).clone();
        self.check_cols(&xv)?;
        let (mean, var) = self.active_statistics(&xv)?;
        let neg_mean: Vec<f64> = mean.iter().map(|m| -m).collect();
        let inv_sd: Vec<f64> = var.iter().map(|v| 1.0 / (v + self.eps).sqrt()).collect();

        let shift = tape.constant(Matrix::row_vector(&neg_mean));
        let scale = tape.constant(Matrix::row_vector(&inv_sd));
        let centered = tape.add_row(x, shift)?;
        let standardized = tape.mul_row(centered, scale)?;
        let alpha = tape.exp(log_alpha);
        let mut z = tape.mul_row(standardized, alpha)?;

        let alpha_term = broadcast_rows(tape, log_alpha, xv.rows())?;
        let stat_term: f64 = inv_sd.iter().map(|k| k.ln()).sum();
        let mut logdet = tape.add_scalar(alpha_term, stat_term);
        if stop == GradientStop::Full {
            logdet = tape.stop_gradient(logdet);
        }

        if self.rotate {
            let v = self.current_rotation(tape.value(z))?;
            if self.mode == Mode::Train {
                self.last_v = Some(v.clone());
            }
            let vc = tape.constant(v);
            z = tape.matmul(z, vc)?;
        }
        Ok((z, logdet))
    }

    /// Averages per-batch statistics of the block inputs, computes the mean
    /// rotation, and switches to evaluation mode.
    ///
    /// Per-batch rotations are sign-aligned with the last training rotation,
    /// or with the first batch's canonical rotation when there is none.
    pub fn freeze(&mut self, inputs: &[Matrix]) -> Result<&BlockStats> {
        if inputs.is_empty() {
            return Err(Error::InvalidArgument("freezing statistics needs at least one batch".into()));
        }
        let n = self.dim();
        let m = inputs.len() as f64;
        let mut mu_bar = vec![0.0; n];
        let mut sigma_bar = vec![0.0; n];
        let mut v_sum = Matrix::zeros(n, n);
        let mut reference = self.last_v.clone();
        for x in inputs {
            self.check_cols(x)?;
            let (mean, var) = batch_statistics(x)?;
            mu_bar.iter_mut().zip(&mean).for_each(|(a, b)| *a += b / m);
            sigma_bar.iter_mut().zip(&var).for_each(|(a, b)| *a += b / m);
            if self.rotate {
                let (z, _) = self.normalize_with(x, &mean, &var)?;
                let v = Self::batch_rotation(&z, reference.as_ref())?;
                if reference.is_none() {
                    reference = Some(v.clone());
                }
                v_sum.add_assign(&v)?;
            }
        }
        let (v_tilde, degenerate) = if self.rotate {
            let p = project_to_son(&v_sum.scale(1.0 / m))?;
            (Some(p.rotation), p.degenerate)
        } else {
            (None, false)
        };
        self.stats = Some(BlockStats {
            mu_bar,
            sigma_bar,
            v_tilde,
            degenerate,
            batches: inputs.len(),
        });
        self.mode = Mode::Eval;
        Ok(self.stats.as_ref().expect("just set"))
    }
}
