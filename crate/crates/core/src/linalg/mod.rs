//! Dense matrices and the decompositions used by the PCA block.

mod matrix;
mod rotation;
mod svd;

pub use matrix::Matrix;
pub use rotation::{
    canonicalize_rotation, chordal_distance, householder_product, is_special_orthogonal,
    project_to_son, rotation_2d, SoProjection,
};
pub use svd::{svd_full, SvdResult, JACOBI_TOL, MAX_SWEEPS};
