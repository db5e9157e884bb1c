use std::cmp::Ordering;

use nalgebra::{DMatrix, DVector, SVD};

use super::{commutator, ensure_finite, ensure_square, fro_dot};
use crate::error::{Error, Result};

/// Largest `N` for which the dense `N² × N²` operator is built.
pub const MAX_COMMUTANT_DIM: usize = 64;

/// Relative singular value below which a direction counts as null.
pub const NULL_TOL: f64 = 1e-10;

/// Vectors shorter than this after deflation are considered spanned by the
/// deflation set.
const DEFLATE_DROP: f64 = 1e-8;

/// Orthonormal basis of nontrivial matrices commuting with `K`.
#[derive(Debug, Clone)]
pub struct CommutantBasis {
    pub generators: Vec<DMatrix<f64>>,
    /// `‖σK − Kσ‖_F` per generator.
    pub residuals: Vec<f64>,
}

/// The homogeneous Sylvester operator `T = I⊗K − Kᵀ⊗I`, acting on
/// column-major `vec(σ)` as `T vec(σ) = vec(Kσ − σK)`.
pub fn sylvester_operator(k: &DMatrix<f64>) -> DMatrix<f64> {
    let n = k.nrows();
    let eye = DMatrix::<f64>::identity(n, n);
    eye.kronecker(k) - k.transpose().kronecker(&eye)
}

/// Right null vectors of `m`, ordered by ascending singular value.
///
/// A singular value counts as zero below `NULL_TOL · σ_max`; a zero matrix
/// has the full space as nullspace.
pub fn null_space(m: &DMatrix<f64>) -> Vec<(f64, DVector<f64>)> {
    let cols = m.ncols();
    if cols == 0 {
        return Vec::new();
    }
    // Pad to at least square so the SVD yields a complete right basis.
    let padded = if m.nrows() < cols {
        let mut p = DMatrix::<f64>::zeros(cols, cols);
        p.view_mut((0, 0), (m.nrows(), cols)).copy_from(m);
        p
    } else {
        m.clone()
    };
    if padded.iter().all(|x| *x == 0.0) {
        return (0..cols)
            .map(|j| (0.0, DVector::from_fn(cols, |i, _| if i == j { 1.0 } else { 0.0 })))
            .collect();
    }
    let svd = SVD::new(padded, false, true);
    let v = svd.v_t.expect("v_t requested").transpose();
    let smax = svd.singular_values.max();
    let mut idx: Vec<usize> = (0..svd.singular_values.len())
        .filter(|&i| svd.singular_values[i] <= NULL_TOL * smax)
        .collect();
    idx.sort_by(|&i, &j| {
        svd.singular_values[i]
            .partial_cmp(&svd.singular_values[j])
            .unwrap_or(Ordering::Equal)
            .then(i.cmp(&j))
    });
    idx.into_iter()
        .map(|j| (svd.singular_values[j], v.column(j).into_owned()))
        .collect()
}

/// Gram–Schmidt under the Frobenius inner product; drops vectors that fall
/// below `drop` after orthogonalization against `against` and earlier ones.
fn orthonormalize(
    candidates: Vec<DMatrix<f64>>,
    against: &[DMatrix<f64>],
    drop: f64,
) -> Vec<DMatrix<f64>> {
    let mut out: Vec<DMatrix<f64>> = Vec::new();
    for mut c in candidates {
        let before = c.norm();
        if before == 0.0 {
            continue;
        }
        // two passes for numerical orthogonality
        for _ in 0..2 {
            for q in against.iter().chain(out.iter()) {
                let p = fro_dot(q, &c);
                c -= q * p;
            }
        }
        let after = c.norm();
        if after > drop * before {
            out.push(c / after);
        }
    }
    out
}

fn finish(
    k: &DMatrix<f64>,
    candidates: Vec<DMatrix<f64>>,
    deflate: &[DMatrix<f64>],
) -> Result<CommutantBasis> {
    let deflate_basis = orthonormalize(deflate.to_vec(), &[], 1e-12);
    let generators = orthonormalize(candidates, &deflate_basis, DEFLATE_DROP);
    if generators.is_empty() {
        return Err(Error::EmptyCommutant);
    }
    let residuals = generators.iter().map(|g| commutator(g, k).norm()).collect();
    Ok(CommutantBasis {
        generators,
        residuals,
    })
}

fn check_deflate(n: usize, deflate: &[DMatrix<f64>]) -> Result<()> {
    for d in deflate {
        if d.nrows() != n || d.ncols() != n {
            return Err(Error::DimensionMismatch(format!(
                "deflation matrix is {}x{}, expected {n}x{n}",
                d.nrows(),
                d.ncols()
            )));
        }
    }
    Ok(())
}

/// Nontrivial commutant of `K`: nullspace of the homogeneous Sylvester
/// operator with the span of `deflate` projected out.
///
/// Generators are Frobenius-orthonormal and follow ascending singular value
/// of the operator. The result is a deterministic function of `K`.
pub fn commutant_basis(k: &DMatrix<f64>, deflate: &[DMatrix<f64>]) -> Result<CommutantBasis> {
    ensure_square(k, "commutant argument")?;
    ensure_finite(k, "commutant argument")?;
    let n = k.nrows();
    if n > MAX_COMMUTANT_DIM {
        return Err(Error::DimensionMismatch(format!(
            "commutant solve supports N <= {MAX_COMMUTANT_DIM}, got {n}"
        )));
    }
    check_deflate(n, deflate)?;
    let t = sylvester_operator(k);
    let candidates = null_space(&t)
        .into_iter()
        .map(|(_, v)| DMatrix::from_column_slice(n, n, v.as_slice()))
        .collect();
    finish(k, candidates, deflate)
}

/// Commuting matrices restricted to the span of `ansatz`.
///
/// Solves `Σ_j x_j [B_j, K] = 0` for the coefficients `x`. Useful when the
/// structure of the generator is known, e.g. a single populated row.
pub fn constrained_commutant(
    k: &DMatrix<f64>,
    ansatz: &[DMatrix<f64>],
    deflate: &[DMatrix<f64>],
) -> Result<CommutantBasis> {
    ensure_square(k, "commutant argument")?;
    ensure_finite(k, "commutant argument")?;
    let n = k.nrows();
    check_deflate(n, ansatz)?;
    check_deflate(n, deflate)?;
    if ansatz.is_empty() {
        return Err(Error::Empty("ansatz basis".into()));
    }
    let mut m = DMatrix::<f64>::zeros(n * n, ansatz.len());
    for (j, b) in ansatz.iter().enumerate() {
        let c = commutator(b, k);
        m.column_mut(j).copy_from_slice(c.as_slice());
    }
    let candidates = null_space(&m)
        .into_iter()
        .map(|(_, x)| {
            ansatz
                .iter()
                .zip(x.iter())
                .fold(DMatrix::<f64>::zeros(n, n), |acc, (b, c)| acc + b * *c)
        })
        .collect();
    finish(k, candidates, deflate)
}

/// Matrix units `E_{row,j}` spanning generators supported on one row.
pub fn first_row_ansatz(n: usize, row: usize) -> Vec<DMatrix<f64>> {
    (0..n)
        .map(|j| {
            let mut e = DMatrix::<f64>::zeros(n, n);
            e[(row, j)] = 1.0;
            e
        })
        .collect()
}
