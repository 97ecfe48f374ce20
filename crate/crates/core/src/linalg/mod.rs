//! Dense matrices and a self-contained thin SVD.

mod matrix;
mod svd;

pub use matrix::{dot, frobenius_norm, matmul, Matrix};
pub use svd::{
    retained_mass, select_rank, svd, truncate, MassMeasure, SvdFactors, ANGLE_TOL, MAX_SWEEPS,
};
