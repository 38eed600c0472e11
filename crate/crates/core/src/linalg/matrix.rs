use std::fmt;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::{self, Exec};

/// Storage precision carried by a [`Matrix`].
///
/// Arithmetic always runs in `f64`; an `F32` matrix has every entry rounded
/// through `f32` whenever it is constructed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    #[default]
    F64,
}

impl Precision {
    #[inline]
    pub fn round(self, x: f64) -> f64 {
        match self {
            Precision::F32 => x as f32 as f64,
            Precision::F64 => x,
        }
    }

    /// The lower of two precisions.
    pub fn meet(self, other: Precision) -> Precision {
        if self == Precision::F32 || other == Precision::F32 {
            Precision::F32
        } else {
            Precision::F64
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Precision::F32 => "f32",
            Precision::F64 => "f64",
        }
    }
}

impl fmt::Display for Precision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Precision {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "f32" | "fp32" => Ok(Precision::F32),
            "f64" | "fp64" => Ok(Precision::F64),
            _ => Err(Error::Config(format!("unknown precision {s:?} (expected f32 or f64)"))),
        }
    }
}

/// Dense row-major real matrix.
#[derive(Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
    precision: Precision,
}

impl fmt::Debug for Matrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "Matrix {}x{} ({})", self.rows, self.cols, self.precision)?;
        for i in 0..self.rows.min(8) {
            let row: Vec<String> = self.row(i).iter().take(8).map(|v| format!("{v:>10.6}")).collect();
            writeln!(f, "  [{}]", row.join(", "))?;
        }
        Ok(())
    }
}

impl Matrix {
    /// Builds a matrix from row-major data, rejecting non-finite entries.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::from_vec_with(rows, cols, data, Precision::F64)
    }

    pub fn from_vec_with(rows: usize, cols: usize, data: Vec<f64>, precision: Precision) -> Result<Self> {
        if rows * cols != data.len() {
            return Err(Error::DimensionMismatch(format!(
                "{rows}x{cols} matrix needs {} entries, got {}",
                rows * cols,
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("matrix input".into()));
        }
        Ok(Self::from_parts(rows, cols, data, precision))
    }

    /// Internal constructor for values produced by our own arithmetic.
    pub(crate) fn from_parts(rows: usize, cols: usize, mut data: Vec<f64>, precision: Precision) -> Self {
        debug_assert_eq!(rows * cols, data.len());
        if precision == Precision::F32 {
            data.iter_mut().for_each(|v| *v = *v as f32 as f64);
        }
        Self { rows, cols, data, precision }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|row| row.len() != c) {
            return Err(Error::DimensionMismatch("ragged rows".into()));
        }
        Self::from_vec(r, c, rows.concat())
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::from_parts(rows, cols, vec![0.0; rows * cols], Precision::F64)
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn diag(values: &[f64]) -> Self {
        let n = values.len();
        let mut m = Self::zeros(n, n);
        for (i, &v) in values.iter().enumerate() {
            m.data[i * n + i] = v;
        }
        m
    }

    /// Standard-normal entries from a ChaCha8 stream seeded with `seed`.
    pub fn gaussian(rows: usize, cols: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self::gaussian_with(rows, cols, &mut rng)
    }

    pub fn gaussian_with<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Self {
        let data = (0..rows * cols).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        Self::from_parts(rows, cols, data, Precision::F64)
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
    pub fn precision(&self) -> Precision {
        self.precision
    }

    pub fn with_precision(&self, precision: Precision) -> Self {
        Self::from_parts(self.rows, self.cols, self.data.clone(), precision)
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = self.precision.round(v);
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self.get(i, j)).collect()
    }

    pub fn transpose(&self) -> Self {
        Self::from_parts(
            self.cols,
            self.rows,
            exec::transpose(&self.data, self.rows, self.cols),
            self.precision,
        )
    }

    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        self.matmul_with(other, Exec::default())
    }

    pub fn matmul_with(&self, other: &Matrix, exec: Exec) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(Error::DimensionMismatch(format!(
                "cannot multiply {}x{} by {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = vec![0.0; self.rows * other.cols];
        exec::gemm_acc(exec, &self.data, &other.data, self.rows, self.cols, other.cols, &mut out);
        Ok(Self::from_parts(self.rows, other.cols, out, self.precision.meet(other.precision)))
    }

    /// `selfᵀ · other` without materializing the transpose of `self`.
    pub fn t_matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.rows != other.rows {
            return Err(Error::DimensionMismatch(format!(
                "cannot form ({}x{})ᵀ·({}x{})",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let (k, n) = (self.cols, other.cols);
        let mut out = vec![0.0; k * n];
        for r in 0..self.rows {
            let a = self.row(r);
            let b = other.row(r);
            for (p, &ap) in a.iter().enumerate() {
                if ap == 0.0 {
                    continue;
                }
                for (o, &bv) in out[p * n..(p + 1) * n].iter_mut().zip(b) {
                    *o += ap * bv;
                }
            }
        }
        Ok(Self::from_parts(k, n, out, self.precision.meet(other.precision)))
    }

    fn zip_with(&self, other: &Matrix, op: &str, f: impl Fn(f64, f64) -> f64) -> Result<Matrix> {
        if self.shape() != other.shape() {
            return Err(Error::DimensionMismatch(format!(
                "{op} of {}x{} and {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect();
        Ok(Self::from_parts(self.rows, self.cols, data, self.precision.meet(other.precision)))
    }

    pub fn add(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_with(other, "sum", |a, b| a + b)
    }

    pub fn sub(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_with(other, "difference", |a, b| a - b)
    }

    pub fn scale(&self, s: f64) -> Matrix {
        Self::from_parts(self.rows, self.cols, self.data.iter().map(|v| v * s).collect(), self.precision)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Matrix {
        Self::from_parts(self.rows, self.cols, self.data.iter().map(|&v| f(v)).collect(), self.precision)
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn trace(&self) -> f64 {
        (0..self.rows.min(self.cols)).map(|i| self.get(i, i)).sum()
    }

    /// `‖self − other‖_F`.
    pub fn distance(&self, other: &Matrix) -> Result<f64> {
        Ok(self.sub(other)?.frobenius_norm())
    }

    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }

    /// `‖self − selfᵀ‖_F` for square matrices.
    pub fn asymmetry(&self) -> f64 {
        if !self.is_square() {
            return f64::INFINITY;
        }
        let n = self.rows;
        let mut acc = 0.0;
        for i in 0..n {
            for j in 0..n {
                let d = self.get(i, j) - self.get(j, i);
                acc += d * d;
            }
        }
        acc.sqrt()
    }

    /// `(self + selfᵀ) / 2`.
    pub fn symmetrize(&self) -> Matrix {
        let n = self.rows;
        let mut out = self.clone();
        for i in 0..n {
            for j in 0..n {
                out.data[i * n + j] = 0.5 * (self.get(i, j) + self.get(j, i));
            }
        }
        out
    }

    /// `‖selfᵀ·self − I‖_F`.
    pub fn orthonormality_defect(&self) -> f64 {
        let g = self.t_matmul(self).expect("square gram");
        g.sub(&Matrix::identity(self.cols)).expect("same shape").frobenius_norm()
    }

    /// Rows selected by `ids`, in order.
    pub fn select_rows(&self, ids: &[usize]) -> Result<Matrix> {
        let mut data = Vec::with_capacity(ids.len() * self.cols);
        for &id in ids {
            if id >= self.rows {
                return Err(Error::TokenOutOfRange { id, vocab: self.rows });
            }
            data.extend_from_slice(self.row(id));
        }
        Ok(Self::from_parts(ids.len(), self.cols, data, self.precision))
    }

    /// Column-block slice `[.., start..start+len]`.
    pub fn columns(&self, start: usize, len: usize) -> Matrix {
        let mut data = Vec::with_capacity(self.rows * len);
        for i in 0..self.rows {
            data.extend_from_slice(&self.row(i)[start..start + len]);
        }
        Self::from_parts(self.rows, len, data, self.precision)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_bad_shapes_and_nan() {
        assert!(matches!(Matrix::from_vec(2, 2, vec![1.0; 3]), Err(Error::DimensionMismatch(_))));
        assert!(matches!(Matrix::from_vec(1, 2, vec![1.0, f64::NAN]), Err(Error::NonFinite(_))));
    }

    #[test]
    fn f32_storage_rounds() {
        let m = Matrix::from_vec_with(1, 1, vec![0.1], Precision::F32).unwrap();
        assert_eq!(m.get(0, 0), 0.1f32 as f64);
        let p = m.matmul(&Matrix::identity(1)).unwrap();
        assert_eq!(p.precision(), Precision::F32);
    }

    #[test]
    fn t_matmul_matches_explicit_transpose() {
        let a = Matrix::gaussian(7, 3, 1);
        let b = Matrix::gaussian(7, 4, 2);
        let direct = a.transpose().matmul(&b).unwrap();
        assert!(a.t_matmul(&b).unwrap().distance(&direct).unwrap() < 1e-12);
    }

    #[test]
    fn gaussian_is_seeded() {
        assert_eq!(Matrix::gaussian(4, 3, 9), Matrix::gaussian(4, 3, 9));
        assert_ne!(Matrix::gaussian(4, 3, 9), Matrix::gaussian(4, 3, 10));
    }
}
