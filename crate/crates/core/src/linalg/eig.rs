use std::cmp::Ordering;

use nalgebra::{DMatrix, DVector, SVD};
use num_complex::Complex64;

use super::{ensure_finite, ensure_square, fro_norm_c, to_complex};
use crate::error::{Error, Result};

pub const DEFAULT_CONDITION_THRESHOLD: f64 = 1e8;

/// Relative distance under which two computed eigenvalues are treated as one
/// repeated eigenvalue.
const CLUSTER_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy)]
pub struct EigOptions {
    pub condition_threshold: f64,
}

impl Default for EigOptions {
    fn default() -> Self {
        Self {
            condition_threshold: DEFAULT_CONDITION_THRESHOLD,
        }
    }
}

/// `K = U diag(λ) U⁻¹` for a real square `K`.
#[derive(Debug, Clone)]
pub struct Eigendecomposition {
    pub eigenvalues: DVector<Complex64>,
    /// Columns are unit-norm eigenvectors.
    pub eigenvectors: DMatrix<Complex64>,
    pub inverse: DMatrix<Complex64>,
    /// 2-norm condition number of the eigenvector matrix.
    pub condition_estimate: f64,
}

impl Eigendecomposition {
    pub fn dim(&self) -> usize {
        self.eigenvalues.len()
    }

    /// `U diag(d) U⁻¹`.
    pub fn reconstruct_with(&self, diag: &[Complex64]) -> DMatrix<Complex64> {
        let mut scaled = self.eigenvectors.clone();
        for (j, d) in diag.iter().enumerate() {
            scaled.column_mut(j).iter_mut().for_each(|x| *x *= *d);
        }
        scaled * &self.inverse
    }

    pub fn reconstruct(&self) -> DMatrix<Complex64> {
        let d: Vec<Complex64> = self.eigenvalues.iter().copied().collect();
        self.reconstruct_with(&d)
    }

    /// `‖K U − U diag(λ)‖_F`.
    pub fn residual(&self, k: &DMatrix<f64>) -> f64 {
        let ku = to_complex(k) * &self.eigenvectors;
        let mut ul = self.eigenvectors.clone();
        for (j, l) in self.eigenvalues.iter().enumerate() {
            ul.column_mut(j).iter_mut().for_each(|x| *x *= *l);
        }
        fro_norm_c(&(ku - ul))
    }

    /// Index of the eigenvalue closest to `target`.
    pub fn index_nearest(&self, target: Complex64) -> usize {
        self.eigenvalues
            .iter()
            .enumerate()
            .min_by(|a, b| {
                (a.1 - target)
                    .norm()
                    .partial_cmp(&(b.1 - target).norm())
                    .unwrap_or(Ordering::Equal)
            })
            .map(|(i, _)| i)
            .unwrap_or(0)
    }
}

fn eigen_order(a: &Complex64, b: &Complex64) -> Ordering {
    b.re.partial_cmp(&a.re)
        .unwrap_or(Ordering::Equal)
        .then(b.im.partial_cmp(&a.im).unwrap_or(Ordering::Equal))
}

/// Unit norm, with the largest-magnitude component made real and positive.
fn normalize_phase(v: &mut DVector<Complex64>) {
    let norm = v.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
    if norm == 0.0 {
        return;
    }
    let mut pivot = Complex64::new(0.0, 0.0);
    for z in v.iter() {
        // strict comparison keeps the first of equal-magnitude components
        if z.norm() > pivot.norm() * (1.0 + 1e-12) {
            pivot = *z;
        }
    }
    let phase = pivot.conj() / pivot.norm();
    for z in v.iter_mut() {
        *z = *z * phase / norm;
    }
}

/// The `m` right singular vectors of `a` with the smallest singular values,
/// ordered from smallest upward.
fn smallest_right_singular_vectors(a: DMatrix<Complex64>, m: usize) -> Vec<DVector<Complex64>> {
    let n = a.ncols();
    let svd = SVD::new(a, false, true);
    let v = svd.v_t.expect("v_t requested").adjoint();
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&i, &j| {
        svd.singular_values[i]
            .partial_cmp(&svd.singular_values[j])
            .unwrap_or(Ordering::Equal)
            .then(i.cmp(&j))
    });
    idx.into_iter()
        .take(m)
        .map(|j| v.column(j).into_owned())
        .collect()
}

fn real_smallest_right_singular_vectors(a: DMatrix<f64>, m: usize) -> Vec<DVector<Complex64>> {
    let n = a.ncols();
    if a.iter().all(|x| *x == 0.0) {
        // every direction is null; keep the canonical basis
        return (0..m)
            .map(|j| DVector::from_fn(n, |i, _| Complex64::new(if i == j { 1.0 } else { 0.0 }, 0.0)))
            .collect();
    }
    let svd = SVD::new(a, false, true);
    let v = svd.v_t.expect("v_t requested").transpose();
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&i, &j| {
        svd.singular_values[i]
            .partial_cmp(&svd.singular_values[j])
            .unwrap_or(Ordering::Equal)
            .then(i.cmp(&j))
    });
    idx.into_iter()
        .take(m)
        .map(|j| v.column(j).map(|x| Complex64::new(x, 0.0)))
        .collect()
}

pub fn eig(k: &DMatrix<f64>) -> Result<Eigendecomposition> {
    eig_with(k, EigOptions::default())
}

/// Eigendecomposition of a real square matrix.
///
/// Eigenvalues come from the real Schur form, so real eigenvalues are exactly
/// real and complex ones arrive in exact conjugate pairs. They are sorted by
/// descending real part, then descending imaginary part. Eigenvectors are the
/// null directions of `K − λI` (several for a repeated eigenvalue); the
/// vector of `λ̄` is the conjugate of the vector of `λ`.
pub fn eig_with(k: &DMatrix<f64>, opts: EigOptions) -> Result<Eigendecomposition> {
    ensure_square(k, "eig argument")?;
    ensure_finite(k, "eig argument")?;
    let n = k.nrows();
    if n == 0 {
        return Err(Error::Empty("eig of a 0x0 matrix".into()));
    }

    let mut values: Vec<Complex64> = k.clone().complex_eigenvalues().iter().copied().collect();
    values.sort_by(eigen_order);

    let scale = k.norm().max(1.0);
    let tol = CLUSTER_TOL * scale;

    // Group adjacent (in sorted order) eigenvalues that coincide numerically.
    let mut clusters: Vec<(usize, usize)> = Vec::new();
    let mut start = 0;
    for i in 1..=n {
        if i == n || (values[i] - values[i - 1]).norm() > tol {
            clusters.push((start, i));
            start = i;
        }
    }

    let mut vectors: Vec<Option<DVector<Complex64>>> = vec![None; n];
    for &(lo, hi) in &clusters {
        let m = hi - lo;
        let mean = values[lo..hi].iter().sum::<Complex64>() / m as f64;
        let is_real = values[lo..hi].iter().all(|z| z.im == 0.0);

        let vs = if is_real {
            let shifted = k - DMatrix::<f64>::identity(n, n) * mean.re;
            real_smallest_right_singular_vectors(shifted, m)
        } else if mean.im < 0.0 {
            // conjugate of an earlier cluster, if one matches
            let partner = clusters.iter().find(|&&(a, b)| {
                b - a == m
                    && a < lo
                    && (values[a..b].iter().sum::<Complex64>() / m as f64 - mean.conj()).norm()
                        <= tol
            });
            match partner {
                Some(&(a, _)) => (a..a + m)
                    .map(|j| vectors[j].as_ref().expect("partner filled").map(|z| z.conj()))
                    .collect(),
                None => {
                    let shifted = to_complex(k) - DMatrix::<Complex64>::identity(n, n) * mean;
                    smallest_right_singular_vectors(shifted, m)
                }
            }
        } else {
            let shifted = to_complex(k) - DMatrix::<Complex64>::identity(n, n) * mean;
            smallest_right_singular_vectors(shifted, m)
        };

        for (offset, mut v) in vs.into_iter().enumerate() {
            if !(mean.im < 0.0 && !is_real) {
                normalize_phase(&mut v);
            }
            vectors[lo + offset] = Some(v);
        }
    }

    let mut u = DMatrix::<Complex64>::zeros(n, n);
    for (j, v) in vectors.into_iter().enumerate() {
        u.set_column(j, &v.expect("every eigenvalue assigned"));
    }

    let sv = SVD::new(u.clone(), false, false).singular_values;
    let smax = sv.max();
    let smin = sv.min();
    let condition = if smin > 0.0 { smax / smin } else { f64::INFINITY };
    if !(condition <= opts.condition_threshold) {
        return Err(Error::NonDiagonalizable {
            condition,
            threshold: opts.condition_threshold,
        });
    }
    let inverse = u.clone().try_inverse().ok_or(Error::NonDiagonalizable {
        condition: f64::INFINITY,
        threshold: opts.condition_threshold,
    })?;

    let dec = Eigendecomposition {
        eigenvalues: DVector::from_vec(values),
        eigenvectors: u,
        inverse,
        condition_estimate: condition,
    };
    // A defective matrix can slip through with a moderate condition number
    // but eigenvectors that do not satisfy K U = U Λ.
    let resid = dec.residual(k);
    if resid > 1e-8 * k.norm().max(f64::MIN_POSITIVE) && resid > 1e-12 {
        return Err(Error::NonDiagonalizable {
            condition: f64::INFINITY,
            threshold: opts.condition_threshold,
        });
    }
    Ok(dec)
}
