use std::fmt;
use std::io::{BufRead, Write};

use crate::error::{contract, Error, Result};

/// Dense row-major matrix of 64-bit reals.
///
/// Log-probability matrices, context and embedding tables, logits and
/// parameter tensors all use this one type.
#[derive(Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl fmt::Debug for Matrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "Matrix {}x{} [", self.rows, self.cols)?;
        for r in 0..self.rows.min(8) {
            writeln!(f, "  {:?}", &self.row(r)[..self.cols.min(8)])?;
        }
        write!(f, "]")
    }
}

impl Matrix {
    /// Zero matrix. Panics if either dimension is zero.
    pub fn zeros(rows: usize, cols: usize) -> Self {
        assert!(rows > 0 && cols > 0, "matrix dimensions must be positive");
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn from_diag(values: &[f64]) -> Self {
        let mut m = Matrix::zeros(values.len(), values.len());
        for (i, &v) in values.iter().enumerate() {
            m[(i, i)] = v;
        }
        m
    }

    /// Builds a matrix from row-major data, checking shape and finiteness.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        contract!(
            rows > 0 && cols > 0,
            "matrix dimensions must be positive, got {rows}x{cols}"
        );
        contract!(
            data.len() == rows * cols,
            "data length {} does not match {rows}x{cols}",
            data.len()
        );
        contract!(
            data.iter().all(|v| v.is_finite()),
            "matrix entries must be finite"
        );
        Ok(Matrix { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        contract!(!rows.is_empty(), "matrix needs at least one row");
        let cols = rows[0].len();
        contract!(
            rows.iter().all(|r| r.len() == cols),
            "ragged rows in matrix literal"
        );
        Matrix::from_vec(rows.len(), cols, rows.concat())
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut m = Matrix::zeros(rows, cols);
        for r in 0..rows {
            for c in 0..cols {
                m.data[r * cols + c] = f(r, c);
            }
        }
        m
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_iter(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.cols)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn transpose(&self) -> Matrix {
        Matrix::from_fn(self.cols, self.rows, |r, c| self[(c, r)])
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn scale(&self, s: f64) -> Matrix {
        self.map(|v| v * s)
    }

    pub fn fill(&mut self, v: f64) {
        self.data.iter_mut().for_each(|x| *x = v);
    }

    /// `self += alpha * other`.
    pub fn axpy(&mut self, alpha: f64, other: &Matrix) {
        debug_assert_eq!(self.shape(), other.shape());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += alpha * b;
        }
    }

    pub fn frobenius_sq(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn max_abs_diff(&self, other: &Matrix) -> f64 {
        assert_eq!(self.shape(), other.shape(), "shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Copies the selected rows, in order, into a new matrix.
    pub fn select_rows(&self, indices: &[usize]) -> Matrix {
        let mut out = Matrix::zeros(indices.len(), self.cols);
        for (dst, &src) in indices.iter().enumerate() {
            out.row_mut(dst).copy_from_slice(self.row(src));
        }
        out
    }

    /// Stacks matrices with equal column counts vertically.
    pub fn vstack(parts: &[Matrix]) -> Result<Matrix> {
        contract!(!parts.is_empty(), "vstack of nothing");
        let cols = parts[0].cols;
        contract!(
            parts.iter().all(|p| p.cols == cols),
            "vstack column mismatch"
        );
        let rows = parts.iter().map(|p| p.rows).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for p in parts {
            data.extend_from_slice(&p.data);
        }
        Ok(Matrix { rows, cols, data })
    }

    /// Writes the matrix as CSV with 17 significant digits per entry.
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        for row in self.row_iter() {
            let line: Vec<String> = row.iter().map(|v| format!("{v:.16e}")).collect();
            writeln!(w, "{}", line.join(","))?;
        }
        Ok(())
    }

    pub fn read_csv<R: BufRead>(r: R) -> Result<Matrix> {
        let mut data = Vec::new();
        let mut rows = 0;
        let mut cols = None;
        for (lineno, line) in r.lines().enumerate() {
            let line = line.map_err(|e| Error::Format(format!("csv read: {e}")))?;
            if line.trim().is_empty() {
                continue;
            }
            let before = data.len();
            for field in line.split(',') {
                let v: f64 = field.trim().parse().map_err(|_| {
                    Error::Format(format!("line {}: bad number {field:?}", lineno + 1))
                })?;
                data.push(v);
            }
            let n = data.len() - before;
            match cols {
                None => cols = Some(n),
                Some(c) if c != n => {
                    return Err(Error::Format(format!(
                        "line {}: expected {c} fields, found {n}",
                        lineno + 1
                    )))
                }
                _ => {}
            }
            rows += 1;
        }
        let cols = cols.ok_or_else(|| Error::Format("empty csv".into()))?;
        Matrix::from_vec(rows, cols, data)
    }
}

impl std::ops::Index<(usize, usize)> for Matrix {
    type Output = f64;
    #[inline]
    fn index(&self, (r, c): (usize, usize)) -> &f64 {
        debug_assert!(r < self.rows && c < self.cols);
        &self.data[r * self.cols + c]
    }
}

impl std::ops::IndexMut<(usize, usize)> for Matrix {
    #[inline]
    fn index_mut(&mut self, (r, c): (usize, usize)) -> &mut f64 {
        debug_assert!(r < self.rows && c < self.cols);
        &mut self.data[r * self.cols + c]
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    // Fixed four-lane summation order.
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for i in 0..chunks {
        let j = 4 * i;
        acc[0] += a[j] * b[j];
        acc[1] += a[j + 1] * b[j + 1];
        acc[2] += a[j + 2] * b[j + 2];
        acc[3] += a[j + 3] * b[j + 3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for j in 4 * chunks..a.len() {
        s += a[j] * b[j];
    }
    s
}

fn shape_err(op: &str, a: &Matrix, b: &Matrix) -> Error {
    Error::Contract(format!(
        "{op}: incompatible shapes {}x{} and {}x{}",
        a.rows, a.cols, b.rows, b.cols
    ))
}

/// `a · b`.
pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.rows {
        return Err(shape_err("matmul", a, b));
    }
    let mut out = Matrix::zeros(a.rows, b.cols);
    for i in 0..a.rows {
        let arow = a.row(i);
        let orow = &mut out.data[i * b.cols..(i + 1) * b.cols];
        for (k, &aik) in arow.iter().enumerate() {
            if aik == 0.0 {
                continue;
            }
            for (o, &bkj) in orow.iter_mut().zip(b.row(k)) {
                *o += aik * bkj;
            }
        }
    }
    Ok(out)
}

/// `a · bᵀ`, the shape of every logit and gate product.
pub fn matmul_nt(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.cols {
        return Err(shape_err("matmul_nt", a, b));
    }
    let mut out = Matrix::zeros(a.rows, b.rows);
    for i in 0..a.rows {
        let arow = a.row(i);
        for j in 0..b.rows {
            out.data[i * b.rows + j] = dot(arow, b.row(j));
        }
    }
    Ok(out)
}

/// `acc += aᵀ · b`, used for weight gradients.
pub fn add_matmul_tn(acc: &mut Matrix, a: &Matrix, b: &Matrix) -> Result<()> {
    if a.rows != b.rows || acc.rows != a.cols || acc.cols != b.cols {
        return Err(shape_err("matmul_tn", a, b));
    }
    for r in 0..a.rows {
        let arow = a.row(r);
        let brow = b.row(r);
        for (i, &ari) in arow.iter().enumerate() {
            if ari == 0.0 {
                continue;
            }
            let accrow = &mut acc.data[i * acc.cols..(i + 1) * acc.cols];
            for (o, &brj) in accrow.iter_mut().zip(brow) {
                *o += ari * brj;
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix {
        Matrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn identity_product_is_noop() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let m = random(3, 5, &mut rng);
        assert_eq!(matmul(&Matrix::identity(3), &m).unwrap(), m);
    }

    #[test]
    fn small_product_by_hand() {
        let a = Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let b = Matrix::from_rows(&[vec![1.0], vec![1.0]]).unwrap();
        let c = matmul(&a, &b).unwrap();
        assert_eq!(c.as_slice(), &[3.0, 7.0]);
    }

    #[test]
    fn matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let a = random(7, 5, &mut rng);
        let b = random(5, 4, &mut rng);
        let mut naive = Matrix::zeros(7, 4);
        for i in 0..7 {
            for j in 0..4 {
                for k in 0..5 {
                    naive[(i, j)] += a[(i, k)] * b[(k, j)];
                }
            }
        }
        assert!(matmul(&a, &b).unwrap().max_abs_diff(&naive) < 1e-12);
        assert!(matmul_nt(&a, &b.transpose()).unwrap().max_abs_diff(&naive) < 1e-12);
        let mut acc = Matrix::zeros(7, 4);
        add_matmul_tn(&mut acc, &a.transpose(), &b).unwrap();
        assert!(acc.max_abs_diff(&naive) < 1e-12);
    }

    #[test]
    fn mismatch_names_both_shapes() {
        let err = matmul(&Matrix::zeros(2, 3), &Matrix::zeros(2, 3)).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("2x3") && msg.contains("contract"), "{msg}");
    }

    #[test]
    fn from_vec_rejects_bad_input() {
        assert!(Matrix::from_vec(2, 2, vec![1.0; 3]).is_err());
        assert!(Matrix::from_vec(1, 2, vec![1.0, f64::NAN]).is_err());
        assert!(Matrix::from_vec(0, 2, vec![]).is_err());
    }

    #[test]
    fn csv_rejects_ragged_rows() {
        let err = Matrix::read_csv("1,2\n3\n".as_bytes()).unwrap_err();
        assert!(matches!(err, Error::Format(_)));
    }

    #[test]
    fn csv_is_lossless_for_awkward_values() {
        let m = Matrix::from_rows(&[vec![0.1, -1e-300, 1.0 / 3.0], vec![f64::MAX, 5e-324, -0.0]])
            .unwrap();
        let mut buf = Vec::new();
        m.write_csv(&mut buf).unwrap();
        let back = Matrix::read_csv(buf.as_slice()).unwrap();
        for (a, b) in m.as_slice().iter().zip(back.as_slice()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }
}
