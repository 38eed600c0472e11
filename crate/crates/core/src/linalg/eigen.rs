use crate::error::{Error, Result};

use super::Matrix;

/// Eigendecomposition of a symmetric matrix: `a = vectors·diag(values)·vectorsᵀ`.
#[derive(Debug, Clone)]
pub struct SymEig {
    /// Ascending.
    pub values: Vec<f64>,
    /// Eigenvectors as columns.
    pub vectors: Matrix,
}

/// Symmetric eigensolver: Householder tridiagonalization followed by
/// implicit QL iterations (the EISPACK `tred2`/`tql2` pair).
pub fn sym_eig(a: &Matrix) -> Result<SymEig> {
    if !a.is_square() {
        return Err(Error::DimensionMismatch(format!("eigendecomposition needs a square matrix, got {:?}", a.shape())));
    }
    let n = a.rows();
    if n == 0 {
        return Ok(SymEig { values: Vec::new(), vectors: Matrix::zeros(0, 0) });
    }
    let sym = a.symmetrize();
    let mut v: Vec<Vec<f64>> = (0..n).map(|i| sym.row(i).to_vec()).collect();
    let mut d = vec![0.0; n];
    let mut e = vec![0.0; n];
    tred2(&mut v, &mut d, &mut e);
    tql2(&mut v, &mut d, &mut e)?;
    let data = v.into_iter().flatten().collect();
    Ok(SymEig { values: d, vectors: Matrix::from_parts(n, n, data, super::Precision::F64) })
}

fn tred2(v: &mut [Vec<f64>], d: &mut [f64], e: &mut [f64]) {
    let n = d.len();
    for j in 0..n {
        d[j] = v[n - 1][j];
    }
    for i in (1..n).rev() {
        let mut scale = 0.0;
        let mut h = 0.0;
        for k in 0..i {
            scale += d[k].abs();
        }
        if scale == 0.0 {
            e[i] = d[i - 1];
            for j in 0..i {
                d[j] = v[i - 1][j];
                v[i][j] = 0.0;
                v[j][i] = 0.0;
            }
        } else {
            for k in 0..i {
                d[k] /= scale;
                h += d[k] * d[k];
            }
            let mut f = d[i - 1];
            let mut g = h.sqrt();
            if f > 0.0 {
                g = -g;
            }
            e[i] = scale * g;
            h -= f * g;
            d[i - 1] = f - g;
            for j in 0..i {
                e[j] = 0.0;
            }
            for j in 0..i {
                f = d[j];
                v[j][i] = f;
                g = e[j] + v[j][j] * f;
                for k in j + 1..i {
                    g += v[k][j] * d[k];
                    e[k] += v[k][j] * f;
                }
                e[j] = g;
            }
            f = 0.0;
            for j in 0..i {
                e[j] /= h;
                f += e[j] * d[j];
            }
            let hh = f / (h + h);
            for j in 0..i {
                e[j] -= hh * d[j];
            }
            for j in 0..i {
                f = d[j];
                g = e[j];
                for k in j..i {
                    v[k][j] -= f * e[k] + g * d[k];
                }
                d[j] = v[i - 1][j];
                v[i][j] = 0.0;
            }
        }
        d[i] = h;
    }
    for i in 0..n - 1 {
        v[n - 1][i] = v[i][i];
        v[i][i] = 1.0;
        let h = d[i + 1];
        if h != 0.0 {
            for k in 0..=i {
                d[k] = v[k][i + 1] / h;
            }
            for j in 0..=i {
                let mut g = 0.0;
                for k in 0..=i {
                    g += v[k][i + 1] * v[k][j];
                }
                for k in 0..=i {
                    v[k][j] -= g * d[k];
                }
            }
        }
        for k in 0..=i {
            v[k][i + 1] = 0.0;
        }
    }
    for j in 0..n {
        d[j] = v[n - 1][j];
        v[n - 1][j] = 0.0;
    }
    v[n - 1][n - 1] = 1.0;
    e[0] = 0.0;
}

const QL_MAX_ITER: usize = 60;

fn tql2(v: &mut [Vec<f64>], d: &mut [f64], e: &mut [f64]) -> Result<()> {
    let n = d.len();
    for i in 1..n {
        e[i - 1] = e[i];
    }
    e[n - 1] = 0.0;
    let mut f = 0.0;
    let mut tst1 = 0.0f64;
    let eps = f64::EPSILON;
    for l in 0..n {
        tst1 = tst1.max(d[l].abs() + e[l].abs());
        let mut m = l;
        while m < n {
            if e[m].abs() <= eps * tst1 {
                break;
            }
            m += 1;
        }
        if m > l {
            let mut iter = 0;
            loop {
                iter += 1;
                if iter > QL_MAX_ITER {
                    return Err(Error::NoConvergence { iterations: QL_MAX_ITER });
                }
                let mut g = d[l];
                let mut p = (d[l + 1] - g) / (2.0 * e[l]);
                let mut r = p.hypot(1.0);
                if p < 0.0 {
                    r = -r;
                }
                d[l] = e[l] / (p + r);
                d[l + 1] = e[l] * (p + r);
                let dl1 = d[l + 1];
                let mut h = g - d[l];
                for di in d.iter_mut().take(n).skip(l + 2) {
                    *di -= h;
                }
                f += h;
                p = d[m];
                let mut c = 1.0;
                let mut c2 = c;
                let mut c3 = c;
                let el1 = e[l + 1];
                let mut s = 0.0;
                let mut s2 = 0.0;
                for i in (l..m).rev() {
                    c3 = c2;
                    c2 = c;
                    s2 = s;
                    g = c * e[i];
                    h = c * p;
                    r = p.hypot(e[i]);
                    e[i + 1] = s * r;
                    s = e[i] / r;
                    c = p / r;
                    p = c * d[i] - s * g;
                    d[i + 1] = h + s * (c * g + s * d[i]);
                    for row in v.iter_mut() {
                        h = row[i + 1];
                        row[i + 1] = s * row[i] + c * h;
                        row[i] = c * row[i] - s * h;
                    }
                }
                p = -s * s2 * c3 * el1 * e[l] / dl1;
                e[l] = s * p;
                d[l] = c * p;
                if e[l].abs() <= eps * tst1 {
                    break;
                }
            }
        }
        d[l] += f;
        e[l] = 0.0;
    }
    // Ascending order with matching vector columns.
    for i in 0..n.saturating_sub(1) {
        let mut k = i;
        let mut p = d[i];
        for (j, &dj) in d.iter().enumerate().skip(i + 1) {
            if dj < p {
                k = j;
                p = dj;
            }
        }
        if k != i {
            d[k] = d[i];
            d[i] = p;
            for row in v.iter_mut() {
                row.swap(i, k);
            }
        }
    }
    Ok(())
}

/// `m = a^{-1/2}` for SPD `a`, via the symmetric eigendecomposition.
///
/// Fails with [`Error::NotPositiveDefinite`] when an eigenvalue is at or below
/// `1e-12·trace(a)/k`.
pub fn spd_inv_sqrt(a: &Matrix) -> Result<Matrix> {
    let k = a.rows();
    let eig = sym_eig(a)?;
    let floor = 1e-12 * a.trace() / k.max(1) as f64;
    if let Some(&lmin) = eig.values.first() {
        if lmin <= floor || lmin <= 0.0 {
            return Err(Error::NotPositiveDefinite(format!("eigenvalue {lmin:e} at or below {floor:e}")));
        }
    }
    let v = &eig.vectors;
    let mut scaled = v.clone();
    for j in 0..k {
        let f = 1.0 / eig.values[j].sqrt();
        for i in 0..k {
            scaled.set(i, j, v.get(i, j) * f);
        }
    }
    Ok(scaled.matmul(&v.transpose())?.symmetrize())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_spd(n: usize, seed: u64) -> Matrix {
        let g = Matrix::gaussian(n + 2, n, seed);
        g.t_matmul(&g).unwrap().symmetrize()
    }

    #[test]
    fn eigen_reconstructs() {
        let a = random_spd(6, 3);
        let eig = sym_eig(&a).unwrap();
        let v = &eig.vectors;
        let back = v.matmul(&Matrix::diag(&eig.values)).unwrap().matmul(&v.transpose()).unwrap();
        assert!(back.distance(&a).unwrap() < 1e-10 * a.frobenius_norm());
        assert!(v.orthonormality_defect() < 1e-12);
        assert!(eig.values.windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn eigenvalues_match_jacobi_oracle() {
        let a = random_spd(5, 13);
        let mut ours = sym_eig(&a).unwrap().values;
        ours.reverse();
        let oracle = crate::linalg::oracle::jacobi_eigenvalues(&a);
        for (x, y) in ours.iter().zip(&oracle) {
            assert!((x - y).abs() < 1e-9 * y.abs().max(1.0));
        }
    }

    #[test]
    fn inv_sqrt_trivial_cases() {
        assert!(spd_inv_sqrt(&Matrix::identity(3)).unwrap().distance(&Matrix::identity(3)).unwrap() < 1e-14);
        let m = spd_inv_sqrt(&Matrix::diag(&[4.0, 9.0])).unwrap();
        assert!(m.distance(&Matrix::diag(&[0.5, 1.0 / 3.0])).unwrap() < 1e-14);
    }

    #[test]
    fn inv_sqrt_random_spd() {
        let a = random_spd(5, 21);
        let m = spd_inv_sqrt(&a).unwrap();
        let mam = m.matmul(&a).unwrap().matmul(&m).unwrap();
        assert!(mam.distance(&Matrix::identity(5)).unwrap() < 1e-8);
        assert!(m.asymmetry() == 0.0);
        let comm = m.matmul(&a).unwrap().sub(&a.matmul(&m).unwrap()).unwrap();
        assert!(comm.frobenius_norm() <= 1e-8 * a.frobenius_norm());
    }

    #[test]
    fn inv_sqrt_rejects_singular() {
        let a = Matrix::diag(&[1.0, 0.0]);
        assert!(matches!(spd_inv_sqrt(&a), Err(Error::NotPositiveDefinite(_))));
        let b = Matrix::diag(&[1.0, -2.0]);
        assert!(matches!(spd_inv_sqrt(&b), Err(Error::NotPositiveDefinite(_))));
    }
}
