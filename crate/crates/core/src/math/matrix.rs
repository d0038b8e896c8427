//! Row-major dense matrices and the handful of kernels the losses need.
//!
//! Every reduction walks its operands left to right so that results are
//! bit-identical between runs.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    values: Vec<f64>,
}

impl DenseMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            values: vec![0.0; rows * cols],
        }
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Self {
            rows,
            cols,
            values: vec![value; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.values[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, values: Vec<f64>) -> Result<Self> {
        if rows * cols != values.len() {
            return Err(Error::BadLength {
                rows,
                cols,
                len: values.len(),
            });
        }
        Ok(Self { rows, cols, values })
    }

    /// Builds a matrix from equally sized rows. An empty slice gives a 0x0 matrix.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut values = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(Error::ShapeMismatch {
                    op: "from_rows",
                    left: (i, cols),
                    right: (i, r.len()),
                });
            }
            values.extend_from_slice(r);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            values,
        })
    }

    pub fn row_vector(values: &[f64]) -> Self {
        Self {
            rows: 1,
            cols: values.len(),
            values: values.to_vec(),
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            rows: 1,
            cols: 1,
            values: vec![value],
        }
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    #[inline]
    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.values[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.values[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.values[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.values[r * self.cols..(r + 1) * self.cols]
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f64]> {
        (0..self.rows).map(move |r| self.row(r))
    }

    /// Item (scalar) of a 1x1 matrix.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.shape(), (1, 1));
        self.values[0]
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub fn select_rows(&self, indices: &[usize]) -> Self {
        let mut values = Vec::with_capacity(indices.len() * self.cols);
        for &i in indices {
            values.extend_from_slice(self.row(i));
        }
        Self {
            rows: indices.len(),
            cols: self.cols,
            values,
        }
    }

    pub fn transpose(&self) -> Self {
        let mut out = Self::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.values[c * self.rows + r] = self.values[r * self.cols + c];
            }
        }
        out
    }

    fn check_same(&self, other: &Self, op: &'static str) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::ShapeMismatch {
                op,
                left: self.shape(),
                right: other.shape(),
            });
        }
        Ok(())
    }

    pub fn zip_map(&self, other: &Self, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        self.check_same(other, op)?;
        Ok(Self {
            rows: self.rows,
            cols: self.cols,
            values: self
                .values
                .iter()
                .zip(&other.values)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            values: self.values.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, "sub", |a, b| a - b)
    }

    pub fn hadamard(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, "hadamard", |a, b| a * b)
    }

    pub fn scale(&self, s: f64) -> Self {
        self.map(|v| v * s)
    }

    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        self.check_same(other, "add_assign")?;
        for (a, &b) in self.values.iter_mut().zip(&other.values) {
            *a += b;
        }
        Ok(())
    }

    pub fn fill(&mut self, v: f64) {
        self.values.iter_mut().for_each(|x| *x = v);
    }

    /// `self · otherᵀ`, with `self` n×d and `other` m×d.
    pub fn matmul_nt(&self, other: &Self) -> Result<Self> {
        if self.cols != other.cols {
            return Err(Error::ShapeMismatch {
                op: "matmul_nt",
                left: self.shape(),
                right: other.shape(),
            });
        }
        let mut out = Self::zeros(self.rows, other.rows);
        for i in 0..self.rows {
            let a = self.row(i);
            for j in 0..other.rows {
                out.values[i * other.rows + j] = dot(a, other.row(j));
            }
        }
        Ok(out)
    }

    /// `self · other`, with `self` n×k and `other` k×m.
    pub fn matmul(&self, other: &Self) -> Result<Self> {
        if self.cols != other.rows {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                left: self.shape(),
                right: other.shape(),
            });
        }
        let mut out = Self::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for j in 0..other.cols {
                let mut acc = 0.0;
                for k in 0..self.cols {
                    acc += self.values[i * self.cols + k] * other.values[k * other.cols + j];
                }
                out.values[i * other.cols + j] = acc;
            }
        }
        Ok(out)
    }

    pub fn sum(&self) -> f64 {
        self.values.iter().fold(0.0, |acc, &v| acc + v)
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |acc: f64, &v| acc.max(v.abs()))
    }

    /// Sum of each row, as an n×1 column.
    pub fn row_sums(&self) -> Self {
        let values = self.iter_rows().map(|r| r.iter().fold(0.0, |a, &v| a + v)).collect();
        Self {
            rows: self.rows,
            cols: 1,
            values,
        }
    }

    /// Sum of each column, as a 1×m row.
    pub fn col_sums(&self) -> Self {
        let mut out = vec![0.0; self.cols];
        for r in self.iter_rows() {
            for (o, &v) in out.iter_mut().zip(r) {
                *o += v;
            }
        }
        Self {
            rows: 1,
            cols: self.cols,
            values: out,
        }
    }

    pub fn row_norms(&self) -> Vec<f64> {
        self.iter_rows().map(|r| dot(r, r).sqrt()).collect()
    }

    /// Divides each row by its Euclidean norm. Returns the normalized matrix
    /// and the norms; a zero (or non-finite) norm is reported by row index.
    pub fn normalize_rows(&self, which: &'static str) -> Result<(Self, Vec<f64>)> {
        let norms = self.row_norms();
        let mut out = self.clone();
        for (r, &n) in norms.iter().enumerate() {
            if !(n > 0.0) || !n.is_finite() {
                return Err(Error::ZeroNormRow { which, row: r });
            }
            out.row_mut(r).iter_mut().for_each(|v| *v /= n);
        }
        Ok((out, norms))
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax_rows(&self) -> Self {
        let mut out = self.clone();
        for r in 0..self.rows {
            softmax_in_place(out.row_mut(r));
        }
        out
    }

    /// Index of the largest entry per row; ties go to the lower index.
    pub fn argmax_rows(&self) -> Vec<usize> {
        self.iter_rows().map(argmax).collect()
    }

    /// Stable content hash over shape and raw bits.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        self.feed_hash(&mut h);
        hex(&h.finalize())
    }

    pub(crate) fn feed_hash(&self, h: &mut Sha256) {
        h.update((self.rows as u64).to_le_bytes());
        h.update((self.cols as u64).to_le_bytes());
        for v in &self.values {
            h.update(v.to_bits().to_le_bytes());
        }
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).fold(0.0, |acc, (&x, &y)| acc + x * y)
}

pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

/// Pairwise cosine similarities between the rows of `a` (n×d) and `b` (m×d).
pub fn cosine_similarity_matrix(a: &DenseMatrix, b: &DenseMatrix) -> Result<DenseMatrix> {
    if a.cols() == 0 || a.cols() != b.cols() {
        return Err(Error::ShapeMismatch {
            op: "cosine_similarity_matrix",
            left: a.shape(),
            right: b.shape(),
        });
    }
    let (an, _) = a.normalize_rows("left operand")?;
    let (bn, _) = b.normalize_rows("right operand")?;
    an.matmul_nt(&bn)
}

/// Row-wise `softmax(scale · logits)`.
pub fn scaled_softmax(logits: &DenseMatrix, scale: f64) -> DenseMatrix {
    logits.scale(scale).softmax_rows()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: &[&[f64]]) -> DenseMatrix {
        DenseMatrix::from_rows(rows).unwrap()
    }

    #[test]
    fn cosine_examples() {
        let e0 = m(&[&[1.0, 0.0]]);
        let e1 = m(&[&[0.0, 1.0]]);
        assert_eq!(cosine_similarity_matrix(&e0, &e0).unwrap().get(0, 0), 1.0);
        assert_eq!(cosine_similarity_matrix(&e0, &e1).unwrap().get(0, 0), 0.0);
        let c = cosine_similarity_matrix(&m(&[&[3.0, 4.0]]), &m(&[&[4.0, 3.0]])).unwrap();
        assert!((c.get(0, 0) - 0.96).abs() < 1e-15);
    }

    #[test]
    fn cosine_zero_row_names_index() {
        let a = m(&[&[1.0, 0.0], &[0.0, 0.0]]);
        let err = cosine_similarity_matrix(&a, &a).unwrap_err();
        assert!(matches!(err, Error::ZeroNormRow { row: 1, .. }), "{err}");
        assert!(err.to_string().contains("row 1"));
    }

    #[test]
    fn softmax_examples() {
        let s = scaled_softmax(&m(&[&[0.3, 0.3, 0.3]]), 17.0);
        for &v in s.values() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let s = scaled_softmax(&m(&[&[0.9, -0.2, 0.1, 0.4]]), 0.0);
        assert!(s.values().iter().all(|&v| v == 0.25));
        let s = scaled_softmax(&m(&[&[1.0, 0.0]]), 30.0);
        let e = (-30.0f64).exp();
        assert!((s.get(0, 0) - 1.0 / (1.0 + e)).abs() < 1e-15);
        assert!((s.get(0, 1) - e / (1.0 + e)).abs() < 1e-25);
    }

    #[test]
    fn softmax_survives_huge_logits() {
        let s = scaled_softmax(&m(&[&[1e3, -1e3]]), 50.0);
        assert!(s.is_finite());
        assert_eq!(s.get(0, 0), 1.0);
    }

    #[test]
    fn argmax_prefers_lower_index_on_tie() {
        assert_eq!(argmax(&[0.2, 0.4, 0.4]), 1);
    }

    #[test]
    fn matmul_variants_agree() {
        let a = m(&[&[1.0, 2.0, 3.0], &[-1.0, 0.5, 2.0]]);
        let b = m(&[&[0.0, 1.0, 1.0], &[2.0, 2.0, -1.0]]);
        assert_eq!(a.matmul_nt(&b).unwrap(), a.matmul(&b.transpose()).unwrap());
    }

    #[test]
    fn bad_lengths_rejected() {
        assert!(DenseMatrix::from_vec(2, 2, vec![1.0; 3]).is_err());
        assert!(DenseMatrix::from_rows(&[vec![1.0], vec![1.0, 2.0]]).is_err());
    }
}
