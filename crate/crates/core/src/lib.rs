//! Normalizing flows with a PCA block that orders latent dimensions by
//! variance, trained against a non-isotropic Gaussian base.

pub mod autodiff;
pub mod data;
pub mod density;
pub mod error;
pub mod eval;
pub mod flow;
pub mod linalg;
pub mod model;
pub mod pca_block;
pub mod trainer;

pub use data::{Dataset, Split, Splits};
pub use density::{BaseDensity, BaseKind};
pub use error::{Error, Result};
pub use flow::FlowModel;
pub use linalg::Matrix;
pub use model::{build_variant, ModelSpec, NeuralPcaModel, Variant};
pub use pca_block::{BlockStats, GradientStop, Mode, PcaBlock};
pub use trainer::{train, MetricsRow, TrainConfig, TrainOutcome};
