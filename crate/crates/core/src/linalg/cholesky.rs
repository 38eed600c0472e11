use crate::error::{Error, Result};

use super::{Matrix, SpdFactor};

/// Cholesky factorization `a = L·Lᵀ`.
pub fn cholesky(a: &Matrix) -> Result<SpdFactor> {
    if !a.is_square() {
        return Err(Error::DimensionMismatch(format!("Cholesky needs a square matrix, got {:?}", a.shape())));
    }
    let scale = a.frobenius_norm();
    if a.asymmetry() > 1e-10 * scale.max(f64::MIN_POSITIVE) {
        return Err(Error::NotPositiveDefinite("input is not symmetric".into()));
    }
    let n = a.rows();
    let mut l = vec![0.0; n * n];
    for j in 0..n {
        let mut pivot = a.get(j, j);
        for k in 0..j {
            pivot -= l[j * n + k] * l[j * n + k];
        }
        if pivot <= 0.0 || !pivot.is_finite() {
            return Err(Error::NotPositiveDefinite(format!("pivot {j} is {pivot:e}")));
        }
        let ljj = pivot.sqrt();
        l[j * n + j] = ljj;
        for i in j + 1..n {
            let mut s = a.get(i, j);
            for k in 0..j {
                s -= l[i * n + k] * l[j * n + k];
            }
            l[i * n + j] = s / ljj;
        }
    }
    SpdFactor::new(Matrix::from_parts(n, n, l, a.precision()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    /// Solve `op(t)·x = b`.
    Left,
    /// Solve `x·op(t) = b`.
    Right,
}

/// Which triangle of the factor holds data, and whether to use its transpose.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TriSolve {
    pub lower: bool,
    pub transpose: bool,
    pub side: Side,
}

impl TriSolve {
    pub const LOWER: TriSolve = TriSolve { lower: true, transpose: false, side: Side::Left };
    pub const LOWER_TRANSPOSED: TriSolve = TriSolve { lower: true, transpose: true, side: Side::Left };
    pub const UPPER: TriSolve = TriSolve { lower: false, transpose: false, side: Side::Left };

    pub fn right(self) -> TriSolve {
        TriSolve { side: Side::Right, ..self }
    }
}

/// Triangular solve by substitution. Never forms an inverse.
///
/// Only the triangle named by `opts.lower` is read.
pub fn tri_solve(t: &Matrix, b: &Matrix, opts: TriSolve) -> Result<Matrix> {
    if !t.is_square() {
        return Err(Error::DimensionMismatch("triangular factor must be square".into()));
    }
    let n = t.rows();
    for i in 0..n {
        if t.get(i, i) == 0.0 {
            return Err(Error::SingularTriangular(i));
        }
    }
    match opts.side {
        Side::Left => {
            if b.rows() != n {
                return Err(Error::DimensionMismatch(format!(
                    "{n}x{n} factor against right-hand side with {} rows",
                    b.rows()
                )));
            }
            let x = solve_left(t, b.data(), b.cols(), opts.lower, opts.transpose);
            Ok(Matrix::from_parts(n, b.cols(), x, t.precision().meet(b.precision())))
        }
        Side::Right => {
            if b.cols() != n {
                return Err(Error::DimensionMismatch(format!(
                    "right-hand side with {} columns against {n}x{n} factor",
                    b.cols()
                )));
            }
            // x·op(t) = b  ⇔  op(t)ᵀ·xᵀ = bᵀ
            let bt = b.transpose();
            let xt = solve_left(t, bt.data(), b.rows(), opts.lower, !opts.transpose);
            Ok(Matrix::from_parts(n, b.rows(), xt, t.precision().meet(b.precision())).transpose())
        }
    }
}

/// Solves `op(t)·x = b` for `b` with `m` columns (row-major), returning `x`.
pub(crate) fn solve_left(t: &Matrix, b: &[f64], m: usize, lower: bool, transpose: bool) -> Vec<f64> {
    let n = t.rows();
    let entry = |i: usize, j: usize| if transpose { t.get(j, i) } else { t.get(i, j) };
    let mut x = b.to_vec();
    let forward = lower != transpose;
    let order: Box<dyn Iterator<Item = usize>> = if forward { Box::new(0..n) } else { Box::new((0..n).rev()) };
    for i in order {
        let range = if forward { 0..i } else { i + 1..n };
        for j in range {
            let c = entry(i, j);
            if c == 0.0 {
                continue;
            }
            let (xi, xj) = split_rows(&mut x, i, j, m);
            for (a, b) in xi.iter_mut().zip(xj) {
                *a -= c * b;
            }
        }
        let d = entry(i, i);
        x[i * m..(i + 1) * m].iter_mut().for_each(|v| *v /= d);
    }
    x
}

fn split_rows(x: &mut [f64], i: usize, j: usize, m: usize) -> (&mut [f64], &[f64]) {
    if i < j {
        let (a, b) = x.split_at_mut(j * m);
        (&mut a[i * m..(i + 1) * m], &b[..m])
    } else {
        let (a, b) = x.split_at_mut(i * m);
        (&mut b[..m], &a[j * m..(j + 1) * m])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_spd(n: usize, seed: u64) -> Matrix {
        let g = Matrix::gaussian(n, n, seed);
        g.t_matmul(&g).unwrap().add(&Matrix::identity(n).scale(n as f64)).unwrap().symmetrize()
    }

    #[test]
    fn identity_and_diagonal() {
        assert_eq!(cholesky(&Matrix::identity(4)).unwrap().lower(), &Matrix::identity(4));
        let l = cholesky(&Matrix::diag(&[4.0, 9.0])).unwrap();
        assert_eq!(l.lower(), &Matrix::diag(&[2.0, 3.0]));
    }

    #[test]
    fn two_by_two_recurrence() {
        // l11 = √4 = 2, l21 = 2/2 = 1, l22 = √(5 − 1) = 2
        let a = Matrix::from_rows(&[vec![4.0, 2.0], vec![2.0, 5.0]]).unwrap();
        let l = cholesky(&a).unwrap();
        assert_eq!(l.lower(), &Matrix::from_rows(&[vec![2.0, 0.0], vec![1.0, 2.0]]).unwrap());
    }

    #[test]
    fn rejects_indefinite_and_asymmetric() {
        let a = Matrix::from_rows(&[vec![1.0, 2.0], vec![2.0, 1.0]]).unwrap();
        assert!(matches!(cholesky(&a), Err(Error::NotPositiveDefinite(_))));
        let b = Matrix::from_rows(&[vec![2.0, 1.0], vec![0.0, 2.0]]).unwrap();
        assert!(matches!(cholesky(&b), Err(Error::NotPositiveDefinite(_))));
    }

    #[test]
    fn reconstructs_random_spd() {
        let a = random_spd(6, 4);
        let l = cholesky(&a).unwrap();
        assert!(l.reconstruct().distance(&a).unwrap() <= 1e-8 * a.frobenius_norm());
    }

    #[test]
    fn hand_substitution() {
        let l = Matrix::from_rows(&[vec![2.0, 0.0], vec![1.0, 2.0]]).unwrap();
        let b = Matrix::from_vec(2, 1, vec![4.0, 5.0]).unwrap();
        let x = tri_solve(&l, &b, TriSolve::LOWER).unwrap();
        assert_eq!(x.data(), &[2.0, 1.5]);
    }

    #[test]
    fn identity_solve_is_noop() {
        let b = Matrix::gaussian(3, 5, 2);
        assert_eq!(tri_solve(&Matrix::identity(3), &b, TriSolve::LOWER).unwrap(), b);
        assert_eq!(tri_solve(&Matrix::identity(5), &b, TriSolve::UPPER.right()).unwrap(), b);
    }

    #[test]
    fn every_variant_has_small_residual() {
        let a = random_spd(5, 8);
        let l = cholesky(&a).unwrap().lower().clone();
        let u = l.transpose();
        let b = Matrix::gaussian(5, 3, 1);
        let br = Matrix::gaussian(3, 5, 2);
        for (t, lower) in [(&l, true), (&u, false)] {
            for transpose in [false, true] {
                let opts = TriSolve { lower, transpose, side: Side::Left };
                let op = if transpose { t.transpose() } else { t.clone() };
                let x = tri_solve(t, &b, opts).unwrap();
                assert!(op.matmul(&x).unwrap().sub(&b).unwrap().max_abs() <= 1e-10);
                let xr = tri_solve(t, &br, opts.right()).unwrap();
                assert!(xr.matmul(&op).unwrap().sub(&br).unwrap().max_abs() <= 1e-10);
            }
        }
    }

    #[test]
    fn zero_diagonal_is_singular() {
        let t = Matrix::from_rows(&[vec![1.0, 0.0], vec![3.0, 0.0]]).unwrap();
        assert!(matches!(
            tri_solve(&t, &Matrix::identity(2), TriSolve::LOWER),
            Err(Error::SingularTriangular(1))
        ));
    }

    #[test]
    fn spd_solve_round_trip() {
        let a = random_spd(7, 11);
        let b = Matrix::gaussian(7, 2, 12);
        let x = cholesky(&a).unwrap().solve(&b).unwrap();
        assert!(a.matmul(&x).unwrap().sub(&b).unwrap().max_abs() <= 1e-8 * b.max_abs());
    }
}
