//! Model variants: a baseline coupling flow optionally followed by the
//! normalization/PCA block and a trainable rotation, over an isotropic or
//! non-isotropic Gaussian base.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::density::{BaseDensity, BaseKind};
use crate::error::{Error, Result};
use crate::flow::{FlowModel, HouseholderRotation, Layer};
use crate::linalg::Matrix;
use crate::pca_block::{batch_statistics, BlockStats, GradientStop, Mode, PcaBlock};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    #[serde(rename = "Baseline")]
    Baseline,
    #[serde(rename = "Baseline-NIG")]
    BaselineNig,
    #[serde(rename = "Baseline-BN")]
    BaselineBn,
    #[serde(rename = "Baseline-R")]
    BaselineR,
    #[serde(rename = "Baseline-BN-R")]
    BaselineBnR,
    #[serde(rename = "Neural-PCA-IG")]
    NeuralPcaIg,
    #[serde(rename = "Neural-PCA")]
    NeuralPca,
}

impl Variant {
    pub const ALL: [Variant; 7] = [
        Variant::Baseline,
        Variant::BaselineNig,
        Variant::BaselineBn,
        Variant::BaselineR,
        Variant::BaselineBnR,
        Variant::NeuralPcaIg,
        Variant::NeuralPca,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Baseline => "Baseline",
            Variant::BaselineNig => "Baseline-NIG",
            Variant::BaselineBn => "Baseline-BN",
            Variant::BaselineR => "Baseline-R",
            Variant::BaselineBnR => "Baseline-BN-R",
            Variant::NeuralPcaIg => "Neural-PCA-IG",
            Variant::NeuralPca => "Neural-PCA",
        }
    }

    pub fn has_batch_norm(self) -> bool {
        matches!(
            self,
            Variant::BaselineBn | Variant::BaselineBnR | Variant::NeuralPcaIg | Variant::NeuralPca
        )
    }

    pub fn has_pca(self) -> bool {
        matches!(self, Variant::NeuralPcaIg | Variant::NeuralPca)
    }

    pub fn has_rotation(self) -> bool {
        matches!(self, Variant::BaselineR | Variant::BaselineBnR)
    }

    pub fn base_kind(self) -> BaseKind {
        match self {
            Variant::Baseline | Variant::NeuralPcaIg => BaseKind::Isotropic,
            _ => BaseKind::NonIsotropic,
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::UnknownVariant(s.to_string()))
    }
}

/// Architecture and base-density settings for [`build_variant`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub variant: Variant,
    pub dim: usize,
    pub depth: usize,
    pub width: usize,
    pub sigma_max: f64,
    pub sigma_min: f64,
    pub seed: u64,
}

impl ModelSpec {
    pub fn new(variant: Variant, dim: usize) -> Self {
        ModelSpec {
            variant,
            dim,
            depth: 6,
            width: 64,
            sigma_max: 1.0,
            sigma_min: 0.1,
            seed: 0,
        }
    }
}

/// Baseline flow `h`, optional block, optional trailing rotation, base density.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NeuralPcaModel {
    pub variant: Variant,
    pub flow: FlowModel,
    pub block: Option<PcaBlock>,
    pub tail: Option<HouseholderRotation>,
    pub base: BaseDensity,
}

/// Numeric forward pass, split by log-det source.
#[derive(Debug, Clone)]
pub struct Forward {
    pub z: Matrix,
    /// Baseline flow and trailing rotation.
    pub logdet_flow: Vec<f64>,
    /// Normalization stage; zeros without a block.
    pub logdet_block: Vec<f64>,
}

impl Forward {
    pub fn logdet(&self) -> Vec<f64> {
        self.logdet_flow
            .iter()
            .zip(&self.logdet_block)
            .map(|(a, b)| a + b)
            .collect()
    }
}

/// Tape forward pass; log-dets are `B × 1` or absent when identically zero.
#[derive(Debug, Clone, Copy)]
pub struct TapeForward {
    pub z: Var,
    pub logdet_flow: Option<Var>,
    pub logdet_block: Option<Var>,
}

pub fn build_variant(spec: &ModelSpec) -> Result<NeuralPcaModel> {
    let n = spec.dim;
    if n < 2 {
        return Err(Error::InvalidArgument(format!(
            "model dimension must be at least 2, got {n}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let flow = FlowModel::coupling_stack(n, spec.depth, spec.width, &mut rng)?;
    let v = spec.variant;
    let block = v.has_batch_norm().then(|| PcaBlock::new(n, v.has_pca()));
    let tail = v
        .has_rotation()
        .then(|| HouseholderRotation::new(n, &mut rng));
    let base = match v.base_kind() {
        BaseKind::Isotropic => BaseDensity::isotropic(n),
        BaseKind::NonIsotropic => BaseDensity::from_schedule(n, spec.sigma_max, spec.sigma_min)?,
    };
    Ok(NeuralPcaModel {
        variant: v,
        flow,
        block,
        tail,
        base,
    })
}

impl NeuralPcaModel {
    pub fn dim(&self) -> usize {
        self.flow.dim
    }

    pub fn params(&self) -> Vec<&Matrix> {
        let mut p = self.flow.params();
        if let Some(b) = &self.block {
            p.push(&b.log_alpha);
        }
        if let Some(t) = &self.tail {
            p.extend(t.vectors.iter());
        }
        p
    }

    pub fn params_mut(&mut self) -> Vec<&mut Matrix> {
        let mut p = self.flow.params_mut();
        if let Some(b) = &mut self.block {
            p.push(&mut b.log_alpha);
        }
        if let Some(t) = &mut self.tail {
            p.extend(t.vectors.iter_mut());
        }
        p
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.as_slice().len()).sum()
    }

    /// Parameters beyond the baseline flow.
    pub fn extra_param_count(&self) -> usize {
        self.param_count() - self.flow.param_count()
    }

    /// True when the model is a fixed bijection (no block, or block frozen).
    pub fn is_frozen(&self) -> bool {
        self.block.as_ref().is_none_or(|b| b.mode == Mode::Eval)
    }

    pub fn block_stats(&self) -> Option<&BlockStats> {
        self.block.as_ref().and_then(|b| b.stats.as_ref())
    }

    /// Switches the block to training mode, keeping any frozen statistics.
    pub fn set_train_mode(&mut self) {
        if let Some(b) = &mut self.block {
            b.mode = Mode::Train;
        }
    }

    fn tail_forward(&self, z: Matrix) -> Result<Matrix> {
        match &self.tail {
            Some(t) => Layer::Householder(t.clone()).forward(&z).map(|(z, _)| z),
            None => Ok(z),
        }
    }

    fn assemble(&self, x: &Matrix, block: impl FnOnce(&Matrix) -> Result<(Matrix, Vec<f64>)>) -> Result<Forward> {
        let (h, logdet_flow) = self.flow.forward(x)?;
        let (z, logdet_block) = match &self.block {
            Some(_) => block(&h)?,
            None => (h, vec![0.0; x.rows()]),
        };
        let z = self.tail_forward(z)?;
        if !z.is_finite() {
            return Err(Error::NonFinite("model output".into()));
        }
        Ok(Forward {
            z,
            logdet_flow,
            logdet_block,
        })
    }

    /// Forward in the block's current mode; training mode caches the batch
    /// rotation.
    pub fn forward(&mut self, x: &Matrix) -> Result<Forward> {
        let (h, logdet_flow) = self.flow.forward(x)?;
        let (z, logdet_block) = match &mut self.block {
            Some(b) => b.forward(&h)?,
            None => (h, vec![0.0; x.rows()]),
        };
        let z = self.tail_forward(z)?;
        if !z.is_finite() {
            return Err(Error::NonFinite("model output".into()));
        }
        Ok(Forward {
            z,
            logdet_flow,
            logdet_block,
        })
    }

    /// Forward of a frozen model.
    pub fn forward_frozen(&self, x: &Matrix) -> Result<Forward> {
        if !self.is_frozen() {
            return Err(Error::Usage("model statistics are not frozen".into()));
        }
        self.assemble(x, |h| self.block.as_ref().expect("checked").forward_frozen(h))
    }

    /// Forward that normalizes and rotates with the statistics of `x` itself
    /// regardless of mode, without updating any cache.
    pub fn forward_batch_stats(&self, x: &Matrix) -> Result<Forward> {
        self.assemble(x, |h| {
            let b = self.block.as_ref().expect("checked");
            let (mean, var) = batch_statistics(h)?;
            let (z, ld) = b.normalize_with(h, &mean, &var)?;
            if !b.rotate {
                return Ok((z, ld));
            }
            let v = PcaBlock::batch_rotation(&z, b.last_v.as_ref())?;
            Ok((z.matmul(&v)?, ld))
        })
    }

    /// `log p(x)` per sample of a frozen model.
    pub fn log_prob(&self, x: &Matrix) -> Result<Vec<f64>> {
        let f = self.forward_frozen(x)?;
        let lp = self.base.log_prob(&f.z)?;
        Ok(lp.iter().zip(f.logdet()).map(|(a, b)| a + b).collect())
    }

    /// Generative direction; needs a frozen model.
    pub fn inverse(&self, z: &Matrix) -> Result<Matrix> {
        if !self.is_frozen() {
            return Err(Error::Usage("model statistics are not frozen".into()));
        }
        let mut h = match &self.tail {
            Some(t) => Layer::Householder(t.clone()).inverse(z)?,
            None => z.clone(),
        };
        if let Some(b) = &self.block {
            h = b.inverse(&h)?;
        }
        self.flow.inverse(&h)
    }

    /// Draws `count` samples through the generative direction.
    pub fn sample<R: rand::Rng>(&self, count: usize, rng: &mut R) -> Result<Matrix> {
        let z = self.base.sample(count, rng);
        self.inverse(&z)
    }

    /// Tape forward with `vars` in [`NeuralPcaModel::params`] order.
    pub fn forward_tape(
        &mut self,
        tape: &mut Tape,
        vars: &[Var],
        x: Var,
        stop: GradientStop,
    ) -> Result<TapeForward> {
        let nf = self.flow.params().len();
        let nb = usize::from(self.block.is_some());
        let nt = self.tail.as_ref().map_or(0, |t| t.vectors.len());
        if vars.len() != nf + nb + nt {
            return Err(Error::Shape(format!(
                "model expects {} parameter vars, got {}",
                nf + nb + nt,
                vars.len()
            )));
        }
        let (mut z, logdet_flow) = self.flow.forward_tape(tape, &vars[..nf], x)?;
        if !tape.value(z).is_finite() {
            return Err(Error::NonFinite("baseline flow output".into()));
        }
        let mut logdet_block = None;
        if let Some(b) = &mut self.block {
            let (zb, ld) = b.forward_tape(tape, vars[nf], z, stop)?;
            z = zb;
            logdet_block = Some(ld);
        }
        if let Some(t) = &self.tail {
            let l = Layer::Householder(t.clone());
            z = l.forward_tape(tape, &vars[nf + nb..], z)?.0;
        }
        Ok(TapeForward {
            z,
            logdet_flow,
            logdet_block,
        })
    }

    /// Outputs of the baseline flow, which are the block inputs.
    pub fn block_inputs(&self, x: &Matrix) -> Result<Matrix> {
        Ok(self.flow.forward(x)?.0)
    }

    /// Runs the statistics pass over `batches` and freezes the block. Returns
    /// `None` for variants without a block.
    pub fn freeze_statistics(&mut self, batches: &[Matrix]) -> Result<Option<BlockStats>> {
        if self.block.is_none() {
            return Ok(None);
        }
        let inputs = batches
            .iter()
            .map(|x| self.block_inputs(x))
            .collect::<Result<Vec<_>>>()?;
        let b = self.block.as_mut().expect("checked");
        Ok(Some(b.freeze(&inputs)?.clone()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_round_trip() {
        for v in Variant::ALL {
            assert_eq!(v.name().parse::<Variant>().unwrap(), v);
        }
        assert!(matches!(
            "Neural-PCA-2".parse::<Variant>(),
            Err(Error::UnknownVariant(_))
        ));
    }

    #[test]
    fn wiring_follows_the_variant_table() {
        let table = [
            (Variant::Baseline, false, false, false, BaseKind::Isotropic),
            (Variant::BaselineNig, false, false, false, BaseKind::NonIsotropic),
            (Variant::BaselineBn, true, false, false, BaseKind::NonIsotropic),
            (Variant::BaselineR, false, false, true, BaseKind::NonIsotropic),
            (Variant::BaselineBnR, true, false, true, BaseKind::NonIsotropic),
            (Variant::NeuralPcaIg, true, true, false, BaseKind::Isotropic),
            (Variant::NeuralPca, true, true, false, BaseKind::NonIsotropic),
        ];
        for (v, bn, pca, rot, base) in table {
            let m = build_variant(&ModelSpec::new(v, 4)).unwrap();
            assert_eq!(m.block.is_some(), bn, "{v}");
            assert_eq!(m.block.as_ref().is_some_and(|b| b.rotate), pca, "{v}");
            assert_eq!(m.tail.is_some(), rot, "{v}");
            assert_eq!(m.base.kind(), base, "{v}");
        }
    }

    #[test]
    fn extra_parameter_counts() {
        let count = |v, n| build_variant(&ModelSpec::new(v, n)).unwrap().extra_param_count();
        assert_eq!(count(Variant::Baseline, 2), 0);
        assert_eq!(count(Variant::BaselineNig, 2), 0);
        assert_eq!(count(Variant::BaselineR, 2), 4);
        assert_eq!(count(Variant::BaselineR, 5), 25);
        assert_eq!(count(Variant::NeuralPca, 7), 7);
        assert_eq!(count(Variant::BaselineBnR, 3), 12);
    }

    #[test]
    fn unfrozen_model_refuses_inverse() {
        let m = build_variant(&ModelSpec::new(Variant::NeuralPca, 2)).unwrap();
        assert!(matches!(m.inverse(&Matrix::zeros(1, 2)), Err(Error::Usage(_))));
        let b = build_variant(&ModelSpec::new(Variant::Baseline, 2)).unwrap();
        assert_eq!(b.inverse(&Matrix::zeros(1, 2)).unwrap(), Matrix::zeros(1, 2));
    }
}
