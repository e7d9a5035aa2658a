use std::path::{Path, PathBuf};

use neural_pca::data::{embedded_manifold, load_idx_images, synthetic_images, two_spiral, ManifoldSpec};
use neural_pca::trainer::LrSchedule;
use neural_pca::{Dataset, GradientStop, ModelSpec, TrainConfig, Variant};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::CliError;

/// Where the data comes from. Generated sets are rebuilt from these settings
/// and the run seed, so a checkpoint fully determines its data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSpec {
    TwoSpiral {
        n_points: usize,
        noise_std: f64,
        turns: f64,
    },
    EmbeddedManifold {
        n_ambient: usize,
        n_intrinsic: usize,
        n_points: usize,
        noise_std: f64,
        n_classes: usize,
        separation: f64,
    },
    SyntheticImages {
        count: usize,
        side: usize,
    },
    Idx {
        images: PathBuf,
        labels: PathBuf,
        pad_to: usize,
        dequantize: bool,
    },
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec::TwoSpiral {
            n_points: 10_000,
            noise_std: 0.02,
            turns: 1.75,
        }
    }
}

impl DatasetSpec {
    pub fn build(&self, seed: u64) -> Result<Dataset, CliError> {
        let ds = match self {
            DatasetSpec::TwoSpiral {
                n_points,
                noise_std,
                turns,
            } => two_spiral(*n_points, *noise_std, *turns, seed)?,
            DatasetSpec::EmbeddedManifold {
                n_ambient,
                n_intrinsic,
                n_points,
                noise_std,
                n_classes,
                separation,
            } => {
                let spec = ManifoldSpec {
                    n_ambient: *n_ambient,
                    n_intrinsic: *n_intrinsic,
                    n_points: *n_points,
                    noise_std: *noise_std,
                    n_classes: *n_classes,
                    separation: *separation,
                };
                embedded_manifold(&spec, seed)?
            }
            DatasetSpec::SyntheticImages { count, side } => synthetic_images(*count, *side, seed)?,
            DatasetSpec::Idx {
                images,
                labels,
                pad_to,
                dequantize,
            } => load_idx_images(images, labels, *pad_to, *dequantize, seed)?,
        };
        Ok(ds)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    pub lr: f64,
    pub schedule: LrSchedule,
    pub iterations: usize,
    pub batch_size: usize,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            lr: 5e-4,
            schedule: LrSchedule::Cosine,
            iterations: 10_000,
            batch_size: 100,
        }
    }
}

/// Everything a training run depends on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub variant: Variant,
    pub dataset: DatasetSpec,
    pub depth: usize,
    pub width: usize,
    pub sigma_max: f64,
    pub sigma_min: f64,
    pub optimizer: OptimizerConfig,
    pub gradient_stop: GradientStop,
    /// Validation interval in iterations; 0 disables validation.
    pub eval_every: usize,
    pub seed: u64,
    pub out_dir: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            variant: Variant::NeuralPca,
            dataset: DatasetSpec::default(),
            depth: 6,
            width: 64,
            sigma_max: 1.0,
            sigma_min: 0.1,
            optimizer: OptimizerConfig::default(),
            gradient_stop: GradientStop::default(),
            eval_every: 500,
            seed: 0,
            out_dir: None,
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self, CliError> {
        let cfg: RunConfig =
            serde_json::from_str(text).map_err(|e| CliError::Config(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let o = &self.optimizer;
        if !(o.lr > 0.0 && o.lr.is_finite()) {
            return Err(CliError::Config(format!("learning rate must be positive, got {}", o.lr)));
        }
        if o.batch_size < 2 {
            return Err(CliError::Config("batch_size must be at least 2".into()));
        }
        if self.depth == 0 || self.width == 0 {
            return Err(CliError::Config("depth and width must be positive".into()));
        }
        if !(self.sigma_min > 0.0 && self.sigma_max >= self.sigma_min) {
            return Err(CliError::Config(format!(
                "need sigma_max >= sigma_min > 0, got ({}, {})",
                self.sigma_max, self.sigma_min
            )));
        }
        Ok(())
    }

    /// Canonical JSON: fixed field order, no whitespace.
    pub fn canonical_json(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }

    /// Hex SHA-256 of the canonical JSON with `out_dir` cleared, so moving a
    /// run does not change its identity.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.out_dir = None;
        let digest = Sha256::digest(c.canonical_json().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn model_spec(&self, dim: usize) -> ModelSpec {
        ModelSpec {
            variant: self.variant,
            dim,
            depth: self.depth,
            width: self.width,
            sigma_max: self.sigma_max,
            sigma_min: self.sigma_min,
            seed: self.seed,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            iterations: self.optimizer.iterations,
            batch_size: self.optimizer.batch_size,
            lr: self.optimizer.lr,
            schedule: self.optimizer.schedule,
            gradient_stop: self.gradient_stop,
            eval_every: self.eval_every,
            seed: self.seed,
            ..TrainConfig::default()
        }
    }
}

/// `--seed` wins, then `NPCA_SEED`, then the config.
pub fn resolve_seed(flag: Option<u64>, config: u64) -> Result<u64, CliError> {
    if let Some(s) = flag {
        return Ok(s);
    }
    match std::env::var("NPCA_SEED") {
        Ok(v) => v
            .trim()
            .parse()
            .map_err(|_| CliError::Config(format!("NPCA_SEED is not an unsigned integer: `{v}`"))),
        Err(_) => Ok(config),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_keys_rejected() {
        assert!(matches!(
            RunConfig::from_json(r#"{"variant": "Baseline", "colour": 3}"#),
            Err(CliError::Config(_))
        ));
        assert!(matches!(
            RunConfig::from_json(r#"{"dataset": {"kind": "two_spiral", "n_points": 10, "noise_std": 0.1, "turns": 1, "x": 0}}"#),
            Err(CliError::Config(_))
        ));
    }

    #[test]
    fn unknown_variant_rejected() {
        assert!(RunConfig::from_json(r#"{"variant": "Neural-PCA-3"}"#).is_err());
    }

    #[test]
    fn canonical_round_trip() {
        let c = RunConfig {
            variant: Variant::BaselineBnR,
            seed: 7,
            ..RunConfig::default()
        };
        let back = RunConfig::from_json(&c.canonical_json()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.hash(), c.hash());
        let moved = RunConfig {
            out_dir: Some("elsewhere".into()),
            ..c.clone()
        };
        assert_eq!(moved.hash(), c.hash());
        let other = RunConfig { seed: 8, ..c.clone() };
        assert_ne!(other.hash(), c.hash());
    }

    #[test]
    fn partial_configs_take_defaults() {
        let c = RunConfig::from_json(r#"{"variant": "Baseline", "optimizer": {"lr": 0.001, "schedule": "Constant", "iterations": 5, "batch_size": 10}}"#).unwrap();
        assert_eq!(c.depth, 6);
        assert_eq!(c.optimizer.iterations, 5);
    }
}
