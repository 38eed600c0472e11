use crate::error::{Error, Result};

use super::{thin_svd, Matrix, OrthonormalFactor};

/// Thin polar factors `a = u·h`.
#[derive(Debug, Clone)]
pub struct Polar {
    pub u: OrthonormalFactor,
    /// Symmetric positive definite `k×k` factor.
    pub h: Matrix,
}

/// Thin polar decomposition of a full-column-rank tall matrix.
///
/// With `a = ū·diag(s)·v̄ᵀ`, returns `u = ū·v̄ᵀ` and `h = v̄·diag(s)·v̄ᵀ`.
pub fn thin_polar(a: &Matrix) -> Result<Polar> {
    let svd = thin_svd(a)?;
    let k = a.cols();
    if k > 0 {
        let s_max = svd.s[0];
        let s_min = svd.s[k - 1];
        if s_max == 0.0 || s_min < 1e-10 * s_max {
            return Err(Error::RankDeficient(format!(
                "smallest singular value {s_min:e} below 1e-10 × largest {s_max:e}"
            )));
        }
    }
    let vt = svd.v.matrix().transpose();
    let u = svd.u.matrix().matmul(&vt)?;
    let vs = svd.v.matrix().matmul(&Matrix::diag(&svd.s))?;
    let h = vs.matmul(&vt)?.symmetrize();
    Ok(Polar { u: OrthonormalFactor::trusted(u.with_precision(a.precision()), 1e-8), h })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn orthonormal_input_is_fixed_point() {
        let (q, _) = crate::linalg::thin_qr(&Matrix::gaussian(6, 3, 1)).unwrap();
        let p = thin_polar(q.matrix()).unwrap();
        assert!(p.u.matrix().distance(q.matrix()).unwrap() < 1e-12);
        assert!(p.h.distance(&Matrix::identity(3)).unwrap() < 1e-12);
    }

    #[test]
    fn diagonal_case() {
        let a = Matrix::from_rows(&[vec![2.0, 0.0], vec![0.0, 3.0], vec![0.0, 0.0]]).unwrap();
        let p = thin_polar(&a).unwrap();
        let u_exp = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![0.0, 0.0]]).unwrap();
        assert!(p.u.matrix().distance(&u_exp).unwrap() < 1e-15);
        assert!(p.h.distance(&Matrix::diag(&[2.0, 3.0])).unwrap() < 1e-15);
    }

    #[test]
    fn random_matches_svd_composition() {
        let a = Matrix::gaussian(10, 4, 3);
        let p = thin_polar(&a).unwrap();
        // Oracle: compose the factors directly from an SVD.
        let svd = thin_svd(&a).unwrap();
        let u_ref = svd.u.matrix().matmul(&svd.v.matrix().transpose()).unwrap();
        assert!(p.u.matrix().distance(&u_ref).unwrap() < 1e-12);
        assert!(p.u.defect() < 1e-12);
        assert!(p.h.asymmetry() < 1e-10);
        let ev = crate::linalg::sym_eig(&p.h).unwrap().values;
        assert!(ev.iter().all(|&l| l > 0.0));
        assert!(p.u.matrix().matmul(&p.h).unwrap().distance(&a).unwrap() <= 1e-6 * a.frobenius_norm());
    }

    #[test]
    fn rank_deficient_rejected() {
        let a = Matrix::from_rows(&[vec![1.0, 1.0], vec![1.0, 1.0], vec![0.0, 0.0]]).unwrap();
        assert!(matches!(thin_polar(&a), Err(Error::RankDeficient(_))));
    }
}
