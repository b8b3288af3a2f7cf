//! Dense matrices, stable softmax primitives, singular values and
//! numerical rank.

mod matrix;
mod stable;
mod svd;

pub use matrix::{add_matmul_tn, dot, matmul, matmul_nt, Matrix};
pub use stable::{log_sum_exp, row_log_softmax, row_shift, row_softmax};
pub(crate) use stable::{log_softmax_in_place, softmax_in_place};
pub use svd::{
    numerical_rank, svd_values, SvdSpectrum, JACOBI_TOLERANCE, MAX_SWEEPS, RANK_THRESHOLD_RULE,
    SVD_ALGORITHM,
};
