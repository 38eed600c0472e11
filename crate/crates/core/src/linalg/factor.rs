use crate::error::{Error, Result};

use super::Matrix;

/// A tall matrix with (numerically) orthonormal columns.
#[derive(Debug, Clone, PartialEq)]
pub struct OrthonormalFactor {
    matrix: Matrix,
    tolerance: f64,
}

impl OrthonormalFactor {
    /// Wraps `matrix`, verifying `‖matrixᵀ·matrix − I‖_F ≤ tolerance`.
    pub fn new(matrix: Matrix, tolerance: f64) -> Result<Self> {
        if matrix.rows() < matrix.cols() {
            return Err(Error::DimensionMismatch(format!(
                "orthonormal factor must be tall, got {}x{}",
                matrix.rows(),
                matrix.cols()
            )));
        }
        let defect = matrix.orthonormality_defect();
        if defect > tolerance {
            return Err(Error::NotOrthonormal { defect, tolerance });
        }
        Ok(Self { matrix, tolerance })
    }

    /// For factors produced by our own decompositions.
    pub(crate) fn trusted(matrix: Matrix, tolerance: f64) -> Self {
        debug_assert!(matrix.orthonormality_defect() <= tolerance.max(1e-6));
        Self { matrix, tolerance }
    }

    pub fn matrix(&self) -> &Matrix {
        &self.matrix
    }

    pub fn into_matrix(self) -> Matrix {
        self.matrix
    }

    pub fn tolerance(&self) -> f64 {
        self.tolerance
    }

    pub fn defect(&self) -> f64 {
        self.matrix.orthonormality_defect()
    }

    /// Re-checks the recorded tolerance.
    pub fn verify(&self) -> Result<()> {
        let defect = self.defect();
        if defect > self.tolerance {
            return Err(Error::NotOrthonormal { defect, tolerance: self.tolerance });
        }
        Ok(())
    }
}

/// Lower-triangular Cholesky factor with strictly positive diagonal.
#[derive(Debug, Clone, PartialEq)]
pub struct SpdFactor {
    lower: Matrix,
}

impl SpdFactor {
    pub fn new(lower: Matrix) -> Result<Self> {
        if !lower.is_square() {
            return Err(Error::DimensionMismatch("Cholesky factor must be square".into()));
        }
        let n = lower.rows();
        for i in 0..n {
            if lower.get(i, i) <= 0.0 {
                return Err(Error::NotPositiveDefinite(format!("diagonal entry {i} is not positive")));
            }
            for j in i + 1..n {
                if lower.get(i, j) != 0.0 {
                    return Err(Error::ShapeMismatch(format!("entry ({i},{j}) above the diagonal is nonzero")));
                }
            }
        }
        Ok(Self { lower })
    }

    pub fn lower(&self) -> &Matrix {
        &self.lower
    }

    pub fn dim(&self) -> usize {
        self.lower.rows()
    }

    /// `L·Lᵀ`.
    pub fn reconstruct(&self) -> Matrix {
        let lt = self.lower.transpose();
        self.lower.matmul(&lt).expect("square").symmetrize()
    }

    /// Solves `(L·Lᵀ)·x = b` with two triangular solves.
    pub fn solve(&self, b: &Matrix) -> Result<Matrix> {
        let y = super::tri_solve(&self.lower, b, super::TriSolve::LOWER)?;
        super::tri_solve(&self.lower, &y, super::TriSolve::LOWER_TRANSPOSED)
    }
}
