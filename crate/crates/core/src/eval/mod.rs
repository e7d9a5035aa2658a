//! Usefulness metrics on corrupted representations and post-training
//! analyses: classifiers, mutual information, post-hoc PCA, rotation
//! distances, latent interpolation and bits per dimension.

mod analysis;
mod classify;
mod mi;

pub use analysis::{
    bits_per_dim, corrupt, default_block_size, interpolate_latents, kappa_grid, lambda_grid,
    post_pca, rotation_distance_histogram, CorruptedRep, DimReport, Interpolation, PostPca,
    RotationDistances, Side, POST_PCA_TIE,
};
pub use classify::{
    accuracy, linear_svm_classify, mlp_classify, ClassifierReport, Labeled, LinearSvm,
    MlpClassifierConfig, SvmConfig, SvmReport,
};
pub use mi::{estimate_mi, MiConfig, MiEstimate, RatioModel};
