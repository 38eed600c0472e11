use crate::error::{Error, Result};

use super::qr::householder_qr;
use super::{Matrix, OrthonormalFactor};

/// Sweep cap for the one-sided Jacobi iteration.
pub const MAX_SWEEPS: usize = 100;
/// A sweep whose largest normalized column inner product is below this ends the iteration.
pub const OFF_DIAGONAL_TOL: f64 = 1e-12;

/// Thin singular value decomposition `a = u·diag(s)·vᵀ`.
#[derive(Debug, Clone)]
pub struct Svd {
    pub u: OrthonormalFactor,
    /// Non-negative, descending.
    pub s: Vec<f64>,
    pub v: OrthonormalFactor,
}

/// Thin SVD of a tall `n×k` matrix.
///
/// The matrix is first reduced to its `k×k` triangular factor by Householder
/// QR; the one-sided (Hestenes) Jacobi method then orthogonalizes the columns
/// of that factor, which implicitly diagonalizes `aᵀa`.
pub fn thin_svd(a: &Matrix) -> Result<Svd> {
    let (n, k) = a.shape();
    if n < k {
        return Err(Error::DimensionMismatch(format!("thin SVD needs rows ≥ cols, got {n}x{k}")));
    }
    if k == 0 {
        return Ok(Svd {
            u: OrthonormalFactor::trusted(Matrix::zeros(n, 0), 0.0),
            s: Vec::new(),
            v: OrthonormalFactor::trusted(Matrix::zeros(0, 0), 0.0),
        });
    }
    let (q, r) = if n == k { (Matrix::identity(k), a.clone()) } else { householder_qr(a) };
    let (ur, s, v) = jacobi_square(&r)?;
    let u = q.matmul(&ur)?;
    Ok(Svd {
        u: OrthonormalFactor::trusted(u, 1e-8),
        s,
        v: OrthonormalFactor::trusted(v, 1e-8),
    })
}

/// One-sided Jacobi on a square matrix. Returns `(u, s, v)` sorted by descending `s`.
fn jacobi_square(a: &Matrix) -> Result<(Matrix, Vec<f64>, Matrix)> {
    let k = a.rows();
    // w[j] is column j of the working matrix, v[j] column j of V.
    let mut w: Vec<Vec<f64>> = (0..k).map(|j| a.column(j)).collect();
    let mut v: Vec<Vec<f64>> = (0..k)
        .map(|j| {
            let mut e = vec![0.0; k];
            e[j] = 1.0;
            e
        })
        .collect();

    let mut converged = false;
    for _sweep in 0..MAX_SWEEPS {
        let mut max_off = 0.0f64;
        for p in 0..k {
            for q in p + 1..k {
                let alpha: f64 = w[p].iter().map(|x| x * x).sum();
                let beta: f64 = w[q].iter().map(|x| x * x).sum();
                if alpha == 0.0 || beta == 0.0 {
                    continue;
                }
                let gamma: f64 = w[p].iter().zip(&w[q]).map(|(x, y)| x * y).sum();
                let rel = gamma.abs() / (alpha * beta).sqrt();
                max_off = max_off.max(rel);
                if rel <= f64::EPSILON {
                    continue;
                }
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate(&mut w, p, q, c, s);
                rotate(&mut v, p, q, c, s);
            }
        }
        if max_off < OFF_DIAGONAL_TOL {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(Error::NoConvergence { iterations: MAX_SWEEPS });
    }

    let norms: Vec<f64> = w.iter().map(|c| c.iter().map(|x| x * x).sum::<f64>().sqrt()).collect();
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&i, &j| norms[j].total_cmp(&norms[i]));

    let s_max = norms[order[0]];
    let floor = s_max * (k as f64) * f64::EPSILON * 4.0;
    let mut u_cols: Vec<Option<Vec<f64>>> = Vec::with_capacity(k);
    let mut s = Vec::with_capacity(k);
    let mut v_cols = Vec::with_capacity(k);
    for &j in &order {
        let sj = norms[j];
        if sj > floor && sj > 0.0 {
            u_cols.push(Some(w[j].iter().map(|x| x / sj).collect()));
        } else {
            u_cols.push(None);
        }
        s.push(sj);
        v_cols.push(v[j].clone());
    }
    let u_cols = complete_orthonormal(u_cols, k);

    Ok((from_columns(k, &u_cols), s, from_columns(k, &v_cols)))
}

#[inline]
fn rotate(cols: &mut [Vec<f64>], p: usize, q: usize, c: f64, s: f64) {
    let (lo, hi) = cols.split_at_mut(q);
    let cp = &mut lo[p];
    let cq = &mut hi[0];
    for (x, y) in cp.iter_mut().zip(cq.iter_mut()) {
        let (a, b) = (*x, *y);
        *x = c * a - s * b;
        *y = s * a + c * b;
    }
}

/// Fills `None` columns with unit vectors orthogonal to every other column.
fn complete_orthonormal(cols: Vec<Option<Vec<f64>>>, n: usize) -> Vec<Vec<f64>> {
    let mut basis: Vec<Vec<f64>> = cols.iter().flatten().cloned().collect();
    let mut candidate = 0;
    cols.into_iter()
        .map(|c| match c {
            Some(c) => c,
            None => loop {
                let mut e = vec![0.0; n];
                e[candidate % n] = 1.0;
                candidate += 1;
                // Two passes of Gram–Schmidt.
                for _ in 0..2 {
                    for b in &basis {
                        let d: f64 = b.iter().zip(&e).map(|(x, y)| x * y).sum();
                        e.iter_mut().zip(b).for_each(|(x, y)| *x -= d * y);
                    }
                }
                let norm = e.iter().map(|x| x * x).sum::<f64>().sqrt();
                if norm > 0.5 {
                    e.iter_mut().for_each(|x| *x /= norm);
                    basis.push(e.clone());
                    break e;
                }
            },
        })
        .collect()
}

fn from_columns(rows: usize, cols: &[Vec<f64>]) -> Matrix {
    let k = cols.len();
    let mut data = vec![0.0; rows * k];
    for (j, c) in cols.iter().enumerate() {
        for (i, &x) in c.iter().enumerate() {
            data[i * k + j] = x;
        }
    }
    Matrix::from_parts(rows, k, data, super::Precision::F64)
}
