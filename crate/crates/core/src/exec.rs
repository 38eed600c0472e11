//! Data-parallel dispatch.
//!
//! Hot loops (row-blocked matrix products, per-checkpoint diagnostics,
//! Monte Carlo sweeps in the test suites) go through [`Exec`]. With the
//! `parallel` feature the parallel variant uses rayon; without it every
//! call runs on the current thread. Both variants produce bit-identical
//! results because work is split along independent output rows only and
//! no reduction order changes.

/// Execution strategy for a data-parallel loop.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Exec {
    Sequential,
    Parallel,
}

impl Exec {
    /// The strategy chosen by the crate features.
    pub const fn default_for_build() -> Self {
        if cfg!(feature = "parallel") {
            Exec::Parallel
        } else {
            Exec::Sequential
        }
    }

    /// Whether this strategy actually fans out in this build.
    pub fn is_parallel(self) -> bool {
        cfg!(feature = "parallel") && self == Exec::Parallel
    }
}

impl Default for Exec {
    fn default() -> Self {
        Self::default_for_build()
    }
}

/// Minimum number of multiply-adds before a product is worth splitting.
pub(crate) const PAR_MIN_WORK: usize = 1 << 16;

/// Runs `f(row_index, row)` over consecutive `row_len`-sized chunks of `out`.
pub fn for_each_row_mut<F>(exec: Exec, out: &mut [f64], row_len: usize, f: F)
where
    F: Fn(usize, &mut [f64]) + Send + Sync,
{
    if row_len == 0 {
        return;
    }
    #[cfg(feature = "parallel")]
    if exec.is_parallel() {
        use rayon::prelude::*;
        out.par_chunks_mut(row_len)
            .enumerate()
            .for_each(|(i, row)| f(i, row));
        return;
    }
    let _ = exec;
    out.chunks_mut(row_len).enumerate().for_each(|(i, row)| f(i, row));
}

/// Maps `f` over `items`, preserving order.
pub fn map<T, U, F>(exec: Exec, items: &[T], f: F) -> Vec<U>
where
    T: Sync,
    U: Send,
    F: Fn(&T) -> U + Send + Sync,
{
    #[cfg(feature = "parallel")]
    if exec.is_parallel() {
        use rayon::prelude::*;
        return items.par_iter().map(f).collect();
    }
    let _ = exec;
    items.iter().map(f).collect()
}

/// Maps `f` over `0..n`, preserving order.
pub fn map_range<U, F>(exec: Exec, n: usize, f: F) -> Vec<U>
where
    U: Send,
    F: Fn(usize) -> U + Send + Sync,
{
    #[cfg(feature = "parallel")]
    if exec.is_parallel() {
        use rayon::prelude::*;
        return (0..n).into_par_iter().map(f).collect();
    }
    let _ = exec;
    (0..n).map(f).collect()
}

/// `out[m×n] += a[m×k] · b[k×n]`, all row-major.
pub fn gemm_acc(exec: Exec, a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    let exec = if m * k * n >= PAR_MIN_WORK { exec } else { Exec::Sequential };
    for_each_row_mut(exec, out, n, |i, row| {
        let a_row = &a[i * k..(i + 1) * k];
        for (p, &aip) in a_row.iter().enumerate() {
            if aip == 0.0 {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(b_row) {
                *o += aip * bv;
            }
        }
    });
}

/// Row-major transpose of an `rows×cols` buffer.
pub fn transpose(data: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; data.len()];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = data[i * cols + j];
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sequential_and_parallel_gemm_are_bit_identical() {
        let (m, k, n) = (67, 45, 53);
        let a: Vec<f64> = (0..m * k).map(|i| ((i * 37 % 101) as f64 - 50.0) / 7.0).collect();
        let b: Vec<f64> = (0..k * n).map(|i| ((i * 11 % 89) as f64 - 44.0) / 3.0).collect();
        let mut s = vec![0.0; m * n];
        let mut p = vec![0.0; m * n];
        gemm_acc(Exec::Sequential, &a, &b, m, k, n, &mut s);
        gemm_acc(Exec::Parallel, &a, &b, m, k, n, &mut p);
        assert_eq!(s, p);
    }

    #[test]
    fn transpose_roundtrip() {
        let d: Vec<f64> = (0..12).map(f64::from).collect();
        let t = transpose(&d, 3, 4);
        assert_eq!(t[1], 4.0);
        assert_eq!(transpose(&t, 4, 3), d);
    }
}

#[cfg(test)]
mod props {
    use super::*;
    use crate::linalg::Matrix;
    use proptest::prelude::*;

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn gemm_is_identical_across_strategies(m in 1usize..70, k in 1usize..40, n in 1usize..70, seed in 0u64..100) {
            let a = Matrix::gaussian(m, k, seed);
            let b = Matrix::gaussian(k, n, seed + 1);
            let mut seq = vec![0.0; m * n];
            let mut par = vec![0.0; m * n];
            gemm_acc(Exec::Sequential, a.data(), b.data(), m, k, n, &mut seq);
            gemm_acc(Exec::Parallel, a.data(), b.data(), m, k, n, &mut par);
            prop_assert_eq!(seq, par);
        }
    }
}
