use crate::error::{Error, Result};

use super::{Matrix, OrthonormalFactor};

/// Householder QR of an `n×k` matrix (`n ≥ k`) without rank checks.
///
/// Returns `(q, r)` with `q` `n×k` column-orthonormal, `r` `k×k` upper
/// triangular, and `diag(r) ≥ 0`.
pub(crate) fn householder_qr(a: &Matrix) -> (Matrix, Matrix) {
    let (n, k) = a.shape();
    debug_assert!(n >= k);
    // Work on columns stored contiguously.
    let mut cols: Vec<Vec<f64>> = (0..k).map(|j| a.column(j)).collect();
    let mut reflectors: Vec<Option<Vec<f64>>> = Vec::with_capacity(k);

    for j in 0..k {
        let x = &cols[j][j..];
        let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 {
            reflectors.push(None);
            continue;
        }
        let alpha = if x[0] > 0.0 { -norm } else { norm };
        let mut v: Vec<f64> = x.to_vec();
        v[0] -= alpha;
        let vnorm = v.iter().map(|t| t * t).sum::<f64>().sqrt();
        if vnorm == 0.0 {
            reflectors.push(None);
            continue;
        }
        v.iter_mut().for_each(|t| *t /= vnorm);
        for col in cols.iter_mut().skip(j) {
            apply_reflector(&v, &mut col[j..]);
        }
        reflectors.push(Some(v));
    }

    let mut r = Matrix::zeros(k, k);
    for (j, col) in cols.iter().enumerate() {
        for i in 0..=j {
            r.set(i, j, col[i]);
        }
    }

    // Q = H_0 ⋯ H_{k-1} · I[:, :k], built column by column.
    let mut q_cols: Vec<Vec<f64>> = (0..k)
        .map(|j| {
            let mut e = vec![0.0; n];
            e[j] = 1.0;
            e
        })
        .collect();
    for (j, refl) in reflectors.iter().enumerate().rev() {
        if let Some(v) = refl {
            for col in q_cols.iter_mut() {
                apply_reflector(v, &mut col[j..]);
            }
        }
    }

    // Canonical signs: non-negative diagonal of r.
    for i in 0..k {
        if r.get(i, i) < 0.0 {
            for j in i..k {
                r.set(i, j, -r.get(i, j));
            }
            q_cols[i].iter_mut().for_each(|t| *t = -*t);
        }
    }

    let mut q = vec![0.0; n * k];
    for (j, col) in q_cols.iter().enumerate() {
        for (i, &v) in col.iter().enumerate() {
            q[i * k + j] = v;
        }
    }
    (Matrix::from_parts(n, k, q, a.precision()), r.with_precision(a.precision()))
}

#[inline]
fn apply_reflector(v: &[f64], x: &mut [f64]) {
    let dot: f64 = v.iter().zip(x.iter()).map(|(a, b)| a * b).sum();
    if dot != 0.0 {
        for (xi, vi) in x.iter_mut().zip(v) {
            *xi -= 2.0 * dot * vi;
        }
    }
}

/// Thin QR factorization with non-negative `diag(r)`.
///
/// Fails with [`Error::RankDeficient`] when some `|r[i][i]|` drops below
/// `1e-10·‖a‖_F`.
pub fn thin_qr(a: &Matrix) -> Result<(OrthonormalFactor, Matrix)> {
    let (n, k) = a.shape();
    if n < k {
        return Err(Error::DimensionMismatch(format!("thin QR needs rows ≥ cols, got {n}x{k}")));
    }
    let scale = a.frobenius_norm();
    let (q, r) = householder_qr(a);
    for i in 0..k {
        if r.get(i, i).abs() < 1e-10 * scale || scale == 0.0 {
            return Err(Error::RankDeficient(format!(
                "|r[{i}][{i}]| = {:e} below 1e-10·‖a‖_F",
                r.get(i, i).abs()
            )));
        }
    }
    Ok((OrthonormalFactor::trusted(q, 1e-8), r))
}
