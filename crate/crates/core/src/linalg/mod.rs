//! Dense real-matrix primitives: QR, SVD, thin polar decomposition,
//! Cholesky with triangular solves, SPD inverse square root, and subspace
//! comparison.
//!
//! Everything here is a pure function of its inputs.

mod cholesky;
mod eigen;
mod factor;
mod matrix;
mod polar;
mod qr;
mod subspace;
mod svd;

#[cfg(test)]
pub(crate) mod oracle;

pub use cholesky::{cholesky, tri_solve, Side, TriSolve};
pub use eigen::{spd_inv_sqrt, sym_eig, SymEig};
pub use factor::{OrthonormalFactor, SpdFactor};
pub use matrix::{Matrix, Precision};
pub use polar::{thin_polar, Polar};
pub use qr::thin_qr;
pub use subspace::{principal_angles, procrustes, procrustes_error, Procrustes};
pub use svd::{thin_svd, Svd, MAX_SWEEPS, OFF_DIAGONAL_TOL};

pub(crate) use cholesky::solve_left;
