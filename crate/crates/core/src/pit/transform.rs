use crate::error::{Error, Result};
use crate::linalg::{cholesky, Matrix, SpdFactor, Precision, tri_solve, TriSolve};

/// Bounds applied to the log-diagonal of the Cholesky factor.
pub const LOG_DIAG_CLAMP: (f64, f64) = (-5.0, 5.0);

/// Number of strictly-lower entries of a `d×d` factor.
pub fn strict_lower_len(d: usize) -> usize {
    d * d.saturating_sub(1) / 2
}

/// Position of entry `(i, j)`, `i > j`, in the strictly-lower parameter vector.
pub fn strict_lower_index(i: usize, j: usize) -> usize {
    debug_assert!(i > j);
    i * (i - 1) / 2 + j
}

/// The SPD metric `T = L·Lᵀ`, stored only through the parameters of `L`.
#[derive(Debug, Clone, PartialEq)]
pub struct SpdTransform {
    log_diag: Vec<f64>,
    strict_lower: Vec<f64>,
}

impl SpdTransform {
    pub fn identity(d: usize) -> Self {
        Self { log_diag: vec![0.0; d], strict_lower: vec![0.0; strict_lower_len(d)] }
    }

    pub fn from_params(log_diag: Vec<f64>, strict_lower: Vec<f64>) -> Result<Self> {
        if strict_lower.len() != strict_lower_len(log_diag.len()) {
            return Err(Error::ShapeMismatch(format!(
                "{} strictly-lower entries for dimension {}",
                strict_lower.len(),
                log_diag.len()
            )));
        }
        if log_diag.iter().chain(&strict_lower).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("transform parameters".into()));
        }
        Ok(Self { log_diag, strict_lower })
    }

    /// Parameters reproducing a given Cholesky factor. Diagonal entries
    /// outside the clamp range are clipped.
    pub fn from_factor(l: &SpdFactor) -> Self {
        let m = l.lower();
        let d = l.dim();
        let log_diag = (0..d).map(|i| m.get(i, i).ln()).collect();
        let mut strict_lower = Vec::with_capacity(strict_lower_len(d));
        for i in 0..d {
            for j in 0..i {
                strict_lower.push(m.get(i, j));
            }
        }
        Self { log_diag, strict_lower }
    }

    /// Parameters for `T = target` via `L = cholesky(target)`.
    pub fn from_spd(target: &Matrix) -> Result<Self> {
        Ok(Self::from_factor(&cholesky(target)?))
    }

    pub fn dim(&self) -> usize {
        self.log_diag.len()
    }

    pub fn log_diag(&self) -> &[f64] {
        &self.log_diag
    }

    pub fn strict_lower(&self) -> &[f64] {
        &self.strict_lower
    }

    /// The Cholesky factor `L` with diagonal `exp(clamp(ℓ))`.
    pub fn lower(&self) -> SpdFactor {
        let d = self.dim();
        let mut l = Matrix::zeros(d, d);
        for i in 0..d {
            for j in 0..i {
                l.set(i, j, self.strict_lower[strict_lower_index(i, j)]);
            }
            l.set(i, i, self.log_diag[i].clamp(LOG_DIAG_CLAMP.0, LOG_DIAG_CLAMP.1).exp());
        }
        SpdFactor::new(l).expect("exp diagonal is positive")
    }

    /// `T = L·Lᵀ`, symmetrized.
    pub fn materialize(&self) -> Matrix {
        self.lower().reconstruct()
    }

    /// `T·c`, realized by shifting every `ℓ` by `ln √c`.
    pub fn scaled(&self, c: f64) -> Self {
        let shift = 0.5 * c.ln();
        let s = c.sqrt();
        Self {
            log_diag: self.log_diag.iter().map(|v| v + shift).collect(),
            strict_lower: self.strict_lower.iter().map(|v| v * s).collect(),
        }
    }

    pub fn quantized(&self, precision: Precision) -> Self {
        Self {
            log_diag: self.log_diag.iter().map(|&v| precision.round(v)).collect(),
            strict_lower: self.strict_lower.iter().map(|&v| precision.round(v)).collect(),
        }
    }

    /// `x·T⁻¹` for a row block `x` (`n×d`), through two triangular solves.
    pub fn right_solve(&self, x: &Matrix) -> Result<Matrix> {
        let l = self.lower();
        // x·T⁻¹ = (T⁻¹·xᵀ)ᵀ and T⁻¹ = L⁻ᵀ·L⁻¹.
        let y = tri_solve(l.lower(), &x.transpose(), TriSolve::LOWER)?;
        Ok(tri_solve(l.lower(), &y, TriSolve::LOWER_TRANSPOSED)?.transpose())
    }
}


#[cfg(test)]
mod props {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn strict_lower_index_is_a_bijection(d in 2usize..40) {
            let mut seen = vec![false; strict_lower_len(d)];
            for i in 1..d {
                for j in 0..i {
                    let k = strict_lower_index(i, j);
                    prop_assert!(!seen[k]);
                    seen[k] = true;
                }
            }
            prop_assert!(seen.into_iter().all(|s| s));
        }
    }
}
