//! Shift-stabilized exponentials: log-sum-exp and row-wise (log-)softmax.

use super::Matrix;
use crate::error::{contract, Result};

/// `log Σ exp(v)`, evaluated as `m + log Σ exp(v − m)` with `m = max(v)`.
pub fn log_sum_exp(v: &[f64]) -> Result<f64> {
    contract!(!v.is_empty(), "log_sum_exp of an empty vector");
    Ok(lse_unchecked(v))
}

#[inline]
pub(crate) fn lse_unchecked(v: &[f64]) -> f64 {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    let s: f64 = v.iter().map(|&x| (x - m).exp()).sum();
    m + s.ln()
}

/// In-place log-softmax of one row. Returns the row's log-normalizer.
#[inline]
pub(crate) fn log_softmax_in_place(row: &mut [f64]) -> f64 {
    let lse = lse_unchecked(row);
    row.iter_mut().for_each(|x| *x -= lse);
    lse
}

#[inline]
pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for x in row.iter_mut() {
        *x = (*x - m).exp();
        s += *x;
    }
    let inv = 1.0 / s;
    row.iter_mut().for_each(|x| *x *= inv);
}

/// Softmax of every row. Rows sum to one; entries may underflow to zero for
/// logits more than ~745 below the row maximum.
pub fn row_softmax(m: &Matrix) -> Matrix {
    let mut out = m.clone();
    for r in 0..out.rows() {
        softmax_in_place(out.row_mut(r));
    }
    out
}

/// Log-softmax of every row: `row − LSE(row)`.
pub fn row_log_softmax(m: &Matrix) -> Matrix {
    let mut out = m.clone();
    for r in 0..out.rows() {
        log_softmax_in_place(out.row_mut(r));
    }
    out
}

/// Adds `lambda[i]` to every entry of row `i`, producing a member of the
/// row-shift family of `m`.
pub fn row_shift(m: &Matrix, lambda: &[f64]) -> Result<Matrix> {
    contract!(
        lambda.len() == m.rows(),
        "row_shift: {} shifts for {} rows",
        lambda.len(),
        m.rows()
    );
    let mut out = m.clone();
    for (r, &l) in lambda.iter().enumerate() {
        out.row_mut(r).iter_mut().for_each(|x| *x += l);
    }
    Ok(out)
}
