use crate::error::{Error, Result};

use super::{thin_svd, Matrix, OrthonormalFactor};

const ORTHONORMAL_PRE_TOL: f64 = 1e-6;

fn same_shape(a: &Matrix, b: &Matrix) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::DimensionMismatch(format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

/// Principal angles between the column spans of two orthonormal factors,
/// ascending, in radians.
pub fn principal_angles(b1: &OrthonormalFactor, b2: &OrthonormalFactor) -> Result<Vec<f64>> {
    same_shape(b1.matrix(), b2.matrix())?;
    for b in [b1, b2] {
        let defect = b.defect();
        if defect > ORTHONORMAL_PRE_TOL {
            return Err(Error::NotOrthonormal { defect, tolerance: ORTHONORMAL_PRE_TOL });
        }
    }
    let m = b1.matrix().t_matmul(b2.matrix())?;
    let svd = thin_svd(&m)?;
    // Descending singular values give ascending angles.
    Ok(svd.s.iter().map(|&s| s.clamp(0.0, 1.0).acos()).collect())
}

/// Orthogonal Procrustes alignment of `b1` onto `b2`.
#[derive(Debug, Clone)]
pub struct Procrustes {
    /// `min_R ‖b1·R − b2‖_F` over orthogonal `R`.
    pub error: f64,
    pub rotation: Matrix,
}

/// Solves the orthogonal Procrustes problem.
///
/// The minimizer is `R = ū·v̄ᵀ` from the SVD of `b1ᵀ·b2`. The residual is
/// evaluated directly as `‖b1·R − b2‖_F`, which equals
/// `sqrt(‖b1‖² + ‖b2‖² − 2·Σσ)` but does not lose digits to cancellation
/// when the two inputs nearly agree.
pub fn procrustes(b1: &Matrix, b2: &Matrix) -> Result<Procrustes> {
    same_shape(b1, b2)?;
    let m = b1.t_matmul(b2)?;
    let svd = thin_svd(&m)?;
    let rotation = svd.u.matrix().matmul(&svd.v.matrix().transpose())?;
    let error = b1.matmul(&rotation)?.distance(b2)?;
    Ok(Procrustes { error, rotation })
}

pub fn procrustes_error(b1: &Matrix, b2: &Matrix) -> Result<f64> {
    Ok(procrustes(b1, b2)?.error)
}
