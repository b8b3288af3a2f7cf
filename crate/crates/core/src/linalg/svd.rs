//! Singular values by Householder QR followed by one-sided (Hestenes) Jacobi,
//! and the roundoff-aware numerical rank built on them.
//!
//! The QR step reduces a tall `n × p` input to its `p × p` triangular factor,
//! which has the same singular values; Jacobi rotations then orthogonalize
//! the columns of that factor. Neither step forms a Gram matrix, so singular
//! values far below `σ₁` keep absolute accuracy near `ε·σ₁`, which the rank
//! threshold depends on.

use super::matrix::dot;
use super::Matrix;
use crate::error::{Error, Result};

/// Identifies the decomposition in reports.
pub const SVD_ALGORITHM: &str = "householder-qr+one-sided-jacobi";
/// Identifies the rank cutoff rule in reports.
pub const RANK_THRESHOLD_RULE: &str = "max(rows,cols)*eps*sigma_max";

pub const MAX_SWEEPS: usize = 100;
pub const JACOBI_TOLERANCE: f64 = 1e-12;

/// Singular values of a matrix, sorted non-increasing.
#[derive(Debug, Clone, PartialEq)]
pub struct SvdSpectrum {
    pub values: Vec<f64>,
    pub source_rows: usize,
    pub source_cols: usize,
}

impl SvdSpectrum {
    pub fn sigma_max(&self) -> f64 {
        self.values.first().copied().unwrap_or(0.0)
    }

    /// `max(rows, cols) · ε · σ₁`.
    pub fn rank_threshold(&self) -> f64 {
        self.source_rows.max(self.source_cols) as f64 * f64::EPSILON * self.sigma_max()
    }
}

/// Computes all `min(rows, cols)` singular values of `m`.
pub fn svd_values(m: &Matrix) -> Result<SvdSpectrum> {
    let (rows, cols) = m.shape();
    // Work on columns of the tall orientation.
    let mut columns: Vec<Vec<f64>> = if rows >= cols {
        (0..cols).map(|c| (0..rows).map(|r| m[(r, c)]).collect()).collect()
    } else {
        (0..rows).map(|r| m.row(r).to_vec()).collect()
    };
    let p = columns.len();
    if columns[0].len() > p {
        householder_r(&mut columns);
    }
    let mut values = jacobi_column_norms(&mut columns)?;
    values.sort_by(|a, b| b.total_cmp(a));
    Ok(SvdSpectrum {
        values,
        source_rows: rows,
        source_cols: cols,
    })
}

/// Replaces the `p` columns (each of length `n > p`) by the columns of the
/// `p × p` upper-triangular factor of their QR decomposition.
fn householder_r(columns: &mut [Vec<f64>]) {
    let p = columns.len();
    let n = columns[0].len();
    let mut v = vec![0.0; n];
    for k in 0..p {
        let x = &columns[k][k..];
        let norm = dot(x, x).sqrt();
        if norm == 0.0 {
            continue;
        }
        let alpha = if x[0] > 0.0 { -norm } else { norm };
        let vk = &mut v[k..];
        vk.copy_from_slice(x);
        vk[0] -= alpha;
        let vnorm_sq = dot(vk, vk);
        if vnorm_sq == 0.0 {
            continue;
        }
        for col in columns[k..].iter_mut() {
            let seg = &mut col[k..];
            let f = 2.0 * dot(vk, seg) / vnorm_sq;
            for (s, &vi) in seg.iter_mut().zip(vk.iter()) {
                *s -= f * vi;
            }
        }
        columns[k][k] = alpha;
        columns[k][k + 1..n].fill(0.0);
    }
    for col in columns.iter_mut() {
        col.truncate(p);
    }
}

fn jacobi_column_norms(columns: &mut [Vec<f64>]) -> Result<Vec<f64>> {
    let p = columns.len();
    let mut norms: Vec<f64> = columns.iter().map(|c| dot(c, c)).collect();
    // Columns at or below ε·‖A‖_F hold only rounding noise; their singular
    // values lie under every rank threshold.
    let negligible = f64::EPSILON * f64::EPSILON * norms.iter().sum::<f64>();
    for _sweep in 0..MAX_SWEEPS {
        let mut rotated = false;
        for i in 0..p {
            for j in i + 1..p {
                let alpha = norms[i];
                let beta = norms[j];
                if alpha <= negligible || beta <= negligible {
                    continue;
                }
                let gamma = dot(&columns[i], &columns[j]);
                if gamma.abs() <= JACOBI_TOLERANCE * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                let (left, right) = columns.split_at_mut(j);
                let (ci, cj) = (&mut left[i], &mut right[0]);
                for (a, b) in ci.iter_mut().zip(cj.iter_mut()) {
                    let (x, y) = (*a, *b);
                    *a = c * x - s * y;
                    *b = s * x + c * y;
                }
                norms[i] = dot(ci, ci);
                norms[j] = dot(cj, cj);
            }
        }
        if !rotated {
            return Ok(norms.into_iter().map(f64::sqrt).collect());
        }
    }
    Err(Error::Numerical(format!(
        "one-sided Jacobi did not converge within {MAX_SWEEPS} sweeps"
    )))
}

/// Number of singular values above `max(rows, cols) · ε · σ₁`; zero for a
/// zero matrix.
pub fn numerical_rank(s: &SvdSpectrum) -> usize {
    if s.sigma_max() == 0.0 {
        return 0;
    }
    let tol = s.rank_threshold();
    s.values.iter().filter(|&&v| v > tol).count()
}
