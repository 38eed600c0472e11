use crate::error::{Error, Result};
use crate::linalg::{sym_eig, thin_polar, thin_qr, Matrix, OrthonormalFactor, Precision};

/// Maximum orthonormality defect a [`SharedTokenMemory`] may carry.
pub const MEMORY_TOL: f64 = 1e-5;
/// Ridge added to `z̃ᵀz̃` before the inverse square root in [`retract`].
pub const RETRACTION_RIDGE: f64 = 1e-10;

/// The `V×d` column-orthonormal token memory `z`.
#[derive(Debug, Clone)]
pub struct SharedTokenMemory {
    z: OrthonormalFactor,
    frozen: bool,
    defect: f64,
}

impl SharedTokenMemory {
    pub fn new(z: Matrix, frozen: bool) -> Result<Self> {
        if z.rows() <= z.cols() {
            return Err(Error::DimensionMismatch(format!(
                "token memory needs more rows than columns, got {}x{}",
                z.rows(),
                z.cols()
            )));
        }
        let z = OrthonormalFactor::new(z, MEMORY_TOL)?;
        let defect = z.defect();
        Ok(Self { z, frozen, defect })
    }

    /// Orthonormal memory from a thin QR of a seeded Gaussian matrix.
    pub fn random(vocab: usize, dim: usize, seed: u64) -> Result<Self> {
        if vocab <= dim {
            return Err(Error::DimensionMismatch(format!("vocab {vocab} must exceed width {dim}")));
        }
        let (q, _) = thin_qr(&Matrix::gaussian(vocab, dim, seed))?;
        Self::new(q.into_matrix(), true)
    }

    pub fn z(&self) -> &Matrix {
        self.z.matrix()
    }

    pub fn factor(&self) -> &OrthonormalFactor {
        &self.z
    }

    pub fn vocab(&self) -> usize {
        self.z.matrix().rows()
    }

    pub fn dim(&self) -> usize {
        self.z.matrix().cols()
    }

    pub fn frozen(&self) -> bool {
        self.frozen
    }

    pub fn set_frozen(&mut self, frozen: bool) {
        self.frozen = frozen;
    }

    /// Cached `‖zᵀz − I‖_F`.
    pub fn orthonormality_defect(&self) -> f64 {
        self.defect
    }

    pub fn with_precision(&self, precision: Precision) -> Result<Self> {
        Self::new(self.z().with_precision(precision), self.frozen)
    }
}

/// Singular-value ratio below which a retraction input counts as rank deficient.
const RANK_TOL: f64 = 1e-6;

/// Polar retraction `z̃·(z̃ᵀz̃ + εI)^{-1/2}`, computed in FP64.
pub fn retract_matrix(z_tilde: &Matrix) -> Result<Matrix> {
    let d = z_tilde.cols();
    let z_tilde = z_tilde.with_precision(Precision::F64);
    let mut gram = z_tilde.t_matmul(&z_tilde)?.symmetrize();
    for i in 0..d {
        gram.set(i, i, gram.get(i, i) + RETRACTION_RIDGE);
    }
    let eig = sym_eig(&gram)?;
    let lmax = eig.values.last().copied().unwrap_or(0.0);
    let lmin = eig.values.first().copied().unwrap_or(0.0) - RETRACTION_RIDGE;
    if d > 0 && (lmax <= 0.0 || lmin <= RANK_TOL * RANK_TOL * lmax) {
        return Err(Error::RankDeficient(format!("retraction input has eigenvalue ratio {:e}", lmin / lmax)));
    }
    let v = &eig.vectors;
    let mut scaled = v.clone();
    for j in 0..d {
        let f = 1.0 / eig.values[j].sqrt();
        for i in 0..d {
            scaled.set(i, j, v.get(i, j) * f);
        }
    }
    let m = scaled.matmul(&v.transpose())?.symmetrize();
    z_tilde.matmul(&m)
}

/// Maps a perturbed memory `z_tilde` back onto the orthonormal set.
/// Fails with [`Error::FrozenMemory`] when `memory` is frozen.
pub fn retract(memory: &SharedTokenMemory, z_tilde: &Matrix) -> Result<SharedTokenMemory> {
    if memory.frozen {
        return Err(Error::FrozenMemory);
    }
    if z_tilde.shape() != memory.z().shape() {
        return Err(Error::DimensionMismatch(format!("{:?} vs {:?}", z_tilde.shape(), memory.z().shape())));
    }
    SharedTokenMemory::new(retract_matrix(z_tilde)?, false)
}

/// Orthonormal polar factor of a teacher embedding together with the
/// discarded symmetric factor.
pub fn canonicalize(e0: &Matrix) -> Result<(SharedTokenMemory, Matrix)> {
    let p = thin_polar(e0)?;
    Ok((SharedTokenMemory::new(p.u.into_matrix(), true)?, p.h))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn noisy(seed: u64, eps: f64) -> (Matrix, Matrix) {
        let z = SharedTokenMemory::random(30, 5, seed).unwrap().z().clone();
        let zt = z.add(&Matrix::gaussian(30, 5, seed + 100).scale(eps)).unwrap();
        (z, zt)
    }

    #[test]
    fn retraction_fixed_point() {
        let mem = SharedTokenMemory::random(20, 4, 3).unwrap();
        let mut thawed = mem.clone();
        thawed.set_frozen(false);
        let r = retract(&thawed, mem.z()).unwrap();
        assert!(r.z().distance(mem.z()).unwrap() < 1e-9);
        let r2 = retract(&thawed, &mem.z().scale(2.0)).unwrap();
        assert!(r2.z().distance(mem.z()).unwrap() < 1e-9);
    }

    #[test]
    fn retraction_agrees_with_polar() {
        let (z, zt) = noisy(8, 0.01);
        let r = retract_matrix(&zt).unwrap();
        assert!(r.orthonormality_defect() <= 1e-8);
        assert!(r.distance(&z).unwrap() <= zt.distance(&z).unwrap());
        let oracle = thin_polar(&zt).unwrap().u.into_matrix();
        assert!(r.distance(&oracle).unwrap() < 1e-8);
    }

    #[test]
    fn frozen_memory_refuses_retraction() {
        let mem = SharedTokenMemory::random(10, 3, 1).unwrap();
        assert!(matches!(retract(&mem, mem.z()), Err(Error::FrozenMemory)));
    }

    #[test]
    fn rejects_square_or_non_orthonormal() {
        assert!(SharedTokenMemory::new(Matrix::identity(3), true).is_err());
        assert!(matches!(
            SharedTokenMemory::new(Matrix::gaussian(6, 2, 1), true),
            Err(Error::NotOrthonormal { .. })
        ));
    }

    #[test]
    fn retract_rank_deficient() {
        let mut zt = Matrix::zeros(5, 2);
        zt.set(0, 0, 1.0);
        zt.set(1, 0, 1.0);
        assert!(matches!(retract_matrix(&zt), Err(Error::RankDeficient(_))));
    }
}
