//! Token-interface consistency measurements.
//!
//! `Δ_TI = ‖W_out·E − I_d‖_F`, plus three ways of comparing the input-side
//! basis `b_in = polar(E).u` with the output-side basis
//! `b_out = polar(W_outᵀ).u`: mean rowwise cosine distance, orthogonal
//! Procrustes residual, and the largest principal angle.

mod report;
mod trace;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::{self, Exec};
use crate::linalg::{principal_angles, procrustes_error, thin_polar, Matrix, OrthonormalFactor, Precision};
use crate::pit::TokenHead;

pub use report::{DiagnosticsReport, CSV_HEADER};
pub use trace::{top_k, transition_trace, transition_trace_with, TraceLayer};

/// Orthonormality tolerance for extracted bases.
pub const BASIS_TOL: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BasisSource {
    Tt,
    Pit,
    External,
}

#[derive(Debug, Clone)]
pub struct SemanticBases {
    pub b_in: OrthonormalFactor,
    pub b_out: OrthonormalFactor,
    pub source: BasisSource,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AlignmentMetrics {
    pub cosine_distance: f64,
    pub procrustes_error: f64,
    pub principal_angle_max: f64,
    /// Ascending.
    pub principal_angles: Vec<f64>,
}

fn check_pair(e: &Matrix, w_out: &Matrix) -> Result<()> {
    if e.rows() != w_out.cols() || e.cols() != w_out.rows() {
        return Err(Error::DimensionMismatch(format!(
            "embedding {:?} and unembedding {:?} do not pair",
            e.shape(),
            w_out.shape()
        )));
    }
    Ok(())
}

/// `‖W_out·E − I_d‖_F` in FP64.
pub fn delta_ti(e: &Matrix, w_out: &Matrix) -> Result<f64> {
    check_pair(e, w_out)?;
    let p = w_out.with_precision(Precision::F64).matmul(&e.with_precision(Precision::F64))?;
    p.distance(&Matrix::identity(e.cols()))
}

/// Orthonormal polar factors of `E` and `W_outᵀ`.
pub fn extract_bases(e: &Matrix, w_out: &Matrix, source: BasisSource) -> Result<SemanticBases> {
    check_pair(e, w_out)?;
    let b_in = thin_polar(&e.with_precision(Precision::F64))?.u;
    let b_out = thin_polar(&w_out.with_precision(Precision::F64).transpose())?.u;
    let b_in = OrthonormalFactor::new(b_in.into_matrix(), BASIS_TOL)?;
    let b_out = OrthonormalFactor::new(b_out.into_matrix(), BASIS_TOL)?;
    Ok(SemanticBases { b_in, b_out, source })
}

/// Mean over rows of `1 − cos(a_v, b_v)`, without any alignment.
/// A row that is zero in exactly one input counts as distance 1.
pub fn cosine_distance(a: &Matrix, b: &Matrix) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::DimensionMismatch(format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    let mut total = 0.0;
    for v in 0..a.rows() {
        let (x, y) = (a.row(v), b.row(v));
        let dot: f64 = x.iter().zip(y).map(|(p, q)| p * q).sum();
        let nx = x.iter().map(|p| p * p).sum::<f64>().sqrt();
        let ny = y.iter().map(|q| q * q).sum::<f64>().sqrt();
        total += match (nx > 0.0, ny > 0.0) {
            (true, true) => 1.0 - (dot / (nx * ny)).clamp(-1.0, 1.0),
            (false, false) => 0.0,
            _ => 1.0,
        };
    }
    Ok(total / a.rows().max(1) as f64)
}

pub fn alignment_metrics(bases: &SemanticBases) -> Result<AlignmentMetrics> {
    let (a, b) = (bases.b_in.matrix(), bases.b_out.matrix());
    let cosine_distance = cosine_distance(a, b)?;
    let procrustes_error = procrustes_error(a, b)?;
    let principal_angles = principal_angles(&bases.b_in, &bases.b_out)?;
    let principal_angle_max = principal_angles.iter().copied().fold(0.0, f64::max);
    Ok(AlignmentMetrics { cosine_distance, procrustes_error, principal_angle_max, principal_angles })
}

/// Full report for an `(E, W_out)` pair.
pub fn diagnose_pair(checkpoint_id: &str, e: &Matrix, w_out: &Matrix, source: BasisSource) -> Result<DiagnosticsReport> {
    let delta = delta_ti(e, w_out)?;
    let m = alignment_metrics(&extract_bases(e, w_out, source)?)?;
    Ok(DiagnosticsReport {
        checkpoint_id: checkpoint_id.to_string(),
        delta_ti: delta,
        cosine_distance: m.cosine_distance,
        procrustes_error: m.procrustes_error,
        principal_angle_max: m.principal_angle_max,
        principal_angles_full: m.principal_angles,
        precision_used: Precision::F64,
    })
}

/// Report for a head, using its materialized embedding and unembedding.
pub fn diagnose_head(checkpoint_id: &str, head: &TokenHead) -> Result<DiagnosticsReport> {
    let source = match head {
        TokenHead::Pit(_) => BasisSource::Pit,
        TokenHead::Tt(_) => BasisSource::Tt,
    };
    diagnose_pair(checkpoint_id, &head.materialize_embedding(), &head.materialize_unembedding(), source)
}

/// Diagnoses independent head snapshots, in parallel when `exec` allows.
pub fn diagnose_many(exec: Exec, heads: &[(String, TokenHead)]) -> Vec<Result<DiagnosticsReport>> {
    exec::map(exec, heads, |(id, h)| diagnose_head(id, h))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{thin_qr, thin_svd};
    use crate::pit::{PitHead, SpdTransform, TtHead};

    fn orth(v: usize, d: usize, seed: u64) -> Matrix {
        thin_qr(&Matrix::gaussian(v, d, seed)).unwrap().0.into_matrix()
    }

    fn pinv(e: &Matrix) -> Matrix {
        let svd = thin_svd(e).unwrap();
        let inv: Vec<f64> = svd.s.iter().map(|s| 1.0 / s).collect();
        svd.v.matrix().matmul(&Matrix::diag(&inv)).unwrap().matmul(&svd.u.matrix().transpose()).unwrap()
    }

    #[test]
    fn delta_ti_of_pseudo_inverse_is_zero() {
        let e = Matrix::gaussian(40, 6, 1);
        assert!(delta_ti(&e, &pinv(&e)).unwrap() <= 1e-8);
    }

    #[test]
    fn delta_ti_of_transpose_matches_direct_product() {
        let e = Matrix::gaussian(100, 8, 2);
        let direct = e.t_matmul(&e).unwrap().sub(&Matrix::identity(8)).unwrap().frobenius_norm();
        assert!((delta_ti(&e, &e.transpose()).unwrap() - direct).abs() <= 1e-12 * direct);
    }

    #[test]
    fn delta_ti_basis_change() {
        let e = Matrix::gaussian(30, 4, 3);
        let w = Matrix::gaussian(4, 30, 4);
        let a = delta_ti(&e, &w).unwrap();
        // Orthogonal change of basis leaves the Frobenius residual unchanged.
        let q = orth(4, 4, 5);
        let b = delta_ti(&e.matmul(&q).unwrap(), &q.transpose().matmul(&w).unwrap()).unwrap();
        assert!((a - b).abs() <= 1e-12 * a.max(1.0));
        // A general invertible change is a similarity on W·E − I: a consistent
        // pair stays consistent.
        let m = Matrix::gaussian(4, 4, 6).add(&Matrix::identity(4).scale(4.0)).unwrap();
        let minv = pinv(&m);
        let p = pinv(&e);
        let c = delta_ti(&e.matmul(&minv).unwrap(), &m.matmul(&p).unwrap()).unwrap();
        assert!(c <= 1e-8);
    }

    #[test]
    fn shape_mismatch() {
        assert!(matches!(delta_ti(&Matrix::zeros(5, 2), &Matrix::zeros(2, 4)), Err(Error::DimensionMismatch(_))));
    }

    #[test]
    fn bases_of_orthonormal_transpose_pair() {
        let e = orth(12, 3, 6);
        let b = extract_bases(&e, &e.transpose(), BasisSource::External).unwrap();
        assert!(b.b_in.matrix().distance(&e).unwrap() < 1e-12);
        assert!(b.b_out.matrix().distance(&e).unwrap() < 1e-12);
    }

    #[test]
    fn bases_recover_polar_factor() {
        let u = orth(20, 4, 7);
        let g = Matrix::gaussian(6, 4, 8);
        let h = g.t_matmul(&g).unwrap().symmetrize();
        let e = u.matmul(&h).unwrap();
        let w = pinv(&e);
        let b = extract_bases(&e, &w, BasisSource::External).unwrap();
        assert!(b.b_in.matrix().distance(&u).unwrap() < 1e-10);
    }

    #[test]
    fn identical_bases_score_zero() {
        let e = orth(15, 3, 9);
        let b = extract_bases(&e, &e.transpose(), BasisSource::External).unwrap();
        let m = alignment_metrics(&b).unwrap();
        assert!(m.cosine_distance < 1e-14 && m.procrustes_error < 1e-12 && m.principal_angle_max < 1e-7);
    }

    #[test]
    fn rotation_separates_the_metrics() {
        let b_in = orth(15, 3, 10);
        let mut r = Matrix::identity(3);
        let (c, s) = (0.5f64.cos(), 0.5f64.sin());
        r.set(0, 0, c);
        r.set(1, 1, c);
        r.set(0, 1, -s);
        r.set(1, 0, s);
        let b_out = b_in.matmul(&r).unwrap();
        let bases = SemanticBases {
            b_in: OrthonormalFactor::new(b_in, 1e-10).unwrap(),
            b_out: OrthonormalFactor::new(b_out, 1e-10).unwrap(),
            source: BasisSource::External,
        };
        let m = alignment_metrics(&bases).unwrap();
        assert!(m.procrustes_error < 1e-12);
        assert!(m.principal_angle_max < 1e-7);
        assert!(m.cosine_distance > 1e-3);
    }

    #[test]
    fn pit_head_bases_coincide_with_memory() {
        let mut h = PitHead::init_scratch(50, 5, 11).unwrap();
        let ld = Matrix::gaussian(1, 5, 12).scale(0.4).into_data();
        let sl = Matrix::gaussian(1, 10, 13).scale(0.3).into_data();
        h.set_transform(SpdTransform::from_params(ld, sl).unwrap()).unwrap();
        let z = h.memory().z().clone();
        let head: TokenHead = h.into();
        let b = extract_bases(&head.materialize_embedding(), &head.materialize_unembedding(), BasisSource::Pit).unwrap();
        assert!(b.b_in.matrix().distance(b.b_out.matrix()).unwrap() <= 1e-5);
        // b_out = polar(z·T).u = z exactly; b_in = polar(z·T⁻¹).u = z as well.
        assert!(b.b_out.matrix().distance(&z).unwrap() <= 1e-8);
        let r = diagnose_head("pit", &head).unwrap();
        assert!(r.delta_ti <= 1e-8);
        assert!(r.cosine_distance <= 1e-4 && r.procrustes_error <= 1e-4 && r.principal_angle_max <= 5e-4);
    }

    #[test]
    fn parallel_and_sequential_diagnostics_agree() {
        let heads: Vec<(String, TokenHead)> = (0..4)
            .map(|i| (format!("c{i}"), TtHead::new(Matrix::gaussian(30, 4, 20 + i), Precision::F64).into()))
            .collect();
        let a = diagnose_many(Exec::Sequential, &heads);
        let b = diagnose_many(Exec::Parallel, &heads);
        for (x, y) in a.into_iter().zip(b) {
            assert_eq!(x.unwrap(), y.unwrap());
        }
    }
}

#[cfg(test)]
mod props {
    use super::*;
    use crate::linalg::thin_qr;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn cosine_distance_bounds(rows in 1usize..20, cols in 1usize..6, seed in 0u64..1000) {
            let a = Matrix::gaussian(rows, cols, seed);
            let b = Matrix::gaussian(rows, cols, seed + 3);
            let ab = cosine_distance(&a, &b).unwrap();
            prop_assert!((0.0..=2.0).contains(&ab));
            prop_assert!((ab - cosine_distance(&b, &a).unwrap()).abs() < 1e-15);
            prop_assert!(cosine_distance(&a, &a).unwrap() < 1e-12);
        }

        #[test]
        fn orthogonal_change_of_basis_keeps_delta(seed in 0u64..1000, d in 1usize..6, extra in 1usize..20) {
            let v = d + extra;
            let e = Matrix::gaussian(v, d, seed);
            let w = Matrix::gaussian(d, v, seed + 1);
            let q = thin_qr(&Matrix::gaussian(d, d, seed + 2)).unwrap().0.into_matrix();
            let before = delta_ti(&e, &w).unwrap();
            let after = delta_ti(&e.matmul(&q.transpose()).unwrap(), &q.matmul(&w).unwrap()).unwrap();
            prop_assert!((before - after).abs() <= 1e-10 * before.max(1.0));
        }
    }
}
