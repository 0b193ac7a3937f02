//! Dense matrix kernels and truncated SVD.

mod matrix;
mod svd;

pub use matrix::{frobenius_norm, matmul, matmul_nt, matmul_tn, scale, weighted_sum, Matrix};
pub use svd::{error_ratio_curve, svd, truncate, truncation_error, SvdFactors, MAX_SWEEPS};
