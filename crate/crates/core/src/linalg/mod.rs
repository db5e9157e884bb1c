//! Dense linear algebra kernel.
//!
//! Matrices are [`nalgebra::DMatrix`] values. Factorizations (SVD, LU) come
//! from nalgebra; the eigenvector assembly, the commutant nullspace, the
//! matrix exponential and the pseudoinverse solve are built on top of them
//! here.

mod commutant;
mod eig;
mod expm;
mod lstsq;

pub use commutant::{
    commutant_basis, constrained_commutant, first_row_ansatz, null_space, sylvester_operator,
    CommutantBasis, MAX_COMMUTANT_DIM, NULL_TOL,
};
pub use eig::{eig, eig_with, EigOptions, Eigendecomposition, DEFAULT_CONDITION_THRESHOLD};
pub use expm::matrix_exp;
pub use lstsq::{lstsq, lstsq_with_rank, LSTSQ_CUTOFF};

use nalgebra::DMatrix;
use num_complex::Complex64;

use crate::error::{Error, Result};

pub fn fro_norm(m: &DMatrix<f64>) -> f64 {
    m.norm()
}

pub fn fro_norm_c(m: &DMatrix<Complex64>) -> f64 {
    m.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt()
}

/// Frobenius inner product `tr(Aᵀ B)`.
pub fn fro_dot(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| x * y).sum()
}

/// `σK − Kσ`.
pub fn commutator(sigma: &DMatrix<f64>, k: &DMatrix<f64>) -> DMatrix<f64> {
    sigma * k - k * sigma
}

pub fn to_complex(m: &DMatrix<f64>) -> DMatrix<Complex64> {
    m.map(|x| Complex64::new(x, 0.0))
}

/// Build a matrix from row-major data, rejecting non-finite entries.
pub fn from_row_major(rows: usize, cols: usize, data: &[f64]) -> Result<DMatrix<f64>> {
    if data.len() != rows * cols {
        return Err(Error::DimensionMismatch(format!(
            "{} values for a {rows}x{cols} matrix",
            data.len()
        )));
    }
    if let Some(i) = data.iter().position(|x| !x.is_finite()) {
        return Err(Error::NonFinite(format!("matrix entry {i}")));
    }
    Ok(DMatrix::from_row_slice(rows, cols, data))
}

pub fn to_row_major(m: &DMatrix<f64>) -> Vec<f64> {
    let mut out = Vec::with_capacity(m.len());
    for r in 0..m.nrows() {
        for c in 0..m.ncols() {
            out.push(m[(r, c)]);
        }
    }
    out
}

pub(crate) fn ensure_square(m: &DMatrix<f64>, what: &str) -> Result<()> {
    if m.nrows() != m.ncols() {
        return Err(Error::DimensionMismatch(format!(
            "{what} must be square, got {}x{}",
            m.nrows(),
            m.ncols()
        )));
    }
    Ok(())
}

pub(crate) fn ensure_finite(m: &DMatrix<f64>, what: &str) -> Result<()> {
    if m.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(what.to_string()))
    }
}
