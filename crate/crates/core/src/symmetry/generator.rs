use std::collections::HashMap;
use std::sync::Arc;

use nalgebra::DMatrix;
use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::koopman::KoopmanForwardModel;
use crate::linalg::{
    commutant_basis, commutator, constrained_commutant, eig_with, fro_norm_c, EigOptions,
};

/// Relative commutator tolerance for a generator to count as exact.
pub const COMMUTATION_TOL: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GeneratorKind {
    Commutant,
    Eigenspace,
}

/// Source of symmetry shifts for one action.
#[derive(Debug, Clone, PartialEq)]
pub enum SymmetryGenerator {
    /// A fixed matrix `σ_a` commuting with `K(a)`, scaled to unit mean
    /// absolute entry.
    Commutant {
        sigma: DMatrix<f64>,
        /// `‖σK(a) − K(a)σ‖_F`.
        residual: f64,
        /// Residual exceeds the relative tolerance.
        degraded: bool,
    },
    /// Eigenbasis of `K(a)`; shifts are `Re(U diag(ε) U⁻¹)`.
    Eigenspace {
        u: DMatrix<Complex64>,
        u_inv: DMatrix<Complex64>,
        eigenvalues: Vec<Complex64>,
        /// `‖U U⁻¹ − I‖_F`.
        inverse_residual: f64,
        condition: f64,
    },
}

impl SymmetryGenerator {
    pub fn kind(&self) -> GeneratorKind {
        match self {
            SymmetryGenerator::Commutant { .. } => GeneratorKind::Commutant,
            SymmetryGenerator::Eigenspace { .. } => GeneratorKind::Eigenspace,
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            SymmetryGenerator::Commutant { sigma, .. } => sigma.nrows(),
            SymmetryGenerator::Eigenspace { u, .. } => u.nrows(),
        }
    }

    /// Recorded commutator defect `ε_a` (zero for the eigenspace kind, whose
    /// shifts commute by construction up to the inverse residual).
    pub fn commutator_residual(&self) -> f64 {
        match self {
            SymmetryGenerator::Commutant { residual, .. } => *residual,
            SymmetryGenerator::Eigenspace { .. } => 0.0,
        }
    }

    /// `Re(U diag(ε) U⁻¹)`. With `tie_conjugates`, the second member of each
    /// conjugate pair reuses the first member's `ε`.
    pub fn eigen_shift(&self, eps: &[f64], tie_conjugates: bool) -> Result<DMatrix<f64>> {
        let SymmetryGenerator::Eigenspace {
            u,
            u_inv,
            eigenvalues,
            ..
        } = self
        else {
            return Err(Error::Config("eigen_shift needs an eigenspace generator".into()));
        };
        let n = u.nrows();
        if eps.len() != n {
            return Err(Error::DimensionMismatch(format!(
                "{} shift parameters for a {n}-dimensional eigenbasis",
                eps.len()
            )));
        }
        let mut e = eps.to_vec();
        if tie_conjugates {
            for j in 1..n {
                if eigenvalues[j].im < 0.0 && eigenvalues[j - 1] == eigenvalues[j].conj() {
                    e[j] = e[j - 1];
                }
            }
        }
        let mut scaled = u.clone();
        for (j, ej) in e.iter().enumerate() {
            scaled.column_mut(j).iter_mut().for_each(|x| *x *= *ej);
        }
        Ok((scaled * u_inv).map(|z| z.re))
    }
}

/// Divide by the mean absolute entry so that it becomes 1.
pub fn normalize_mean_abs(sigma: &DMatrix<f64>) -> DMatrix<f64> {
    let mean = sigma.iter().map(|x| x.abs()).sum::<f64>() / sigma.len().max(1) as f64;
    if mean > 0.0 {
        sigma / mean
    } else {
        sigma.clone()
    }
}

/// Sign convention: the entry of largest magnitude is positive.
fn canonical_sign(sigma: DMatrix<f64>) -> DMatrix<f64> {
    let mut best = 0.0f64;
    for x in sigma.iter() {
        if x.abs() > best.abs() * (1.0 + 1e-12) {
            best = *x;
        }
    }
    if best < 0.0 {
        -sigma
    } else {
        sigma
    }
}

fn commutant_generator(k: &DMatrix<f64>, raw: &DMatrix<f64>) -> SymmetryGenerator {
    let sigma = normalize_mean_abs(&canonical_sign(raw.clone()));
    let residual = commutator(&sigma, k).norm();
    let degraded = residual > COMMUTATION_TOL * k.norm() * sigma.norm();
    SymmetryGenerator::Commutant {
        sigma,
        residual,
        degraded,
    }
}

/// KFC generator: first nontrivial commutant direction of `K(a)` after
/// deflating `I` and `K(a)`.
pub fn kfc_generator(model: &KoopmanForwardModel, a: &[f64]) -> Result<SymmetryGenerator> {
    let k = model.k_of_a(a);
    let n = k.nrows();
    let basis = commutant_basis(&k, &[DMatrix::identity(n, n), k.clone()])?;
    Ok(commutant_generator(&k, &basis.generators[0]))
}

/// KFC generator restricted to the span of `ansatz` (no deflation beyond
/// what the ansatz excludes).
pub fn kfc_generator_in(
    model: &KoopmanForwardModel,
    a: &[f64],
    ansatz: &[DMatrix<f64>],
) -> Result<SymmetryGenerator> {
    let k = model.k_of_a(a);
    let basis = constrained_commutant(&k, ansatz, &[])?;
    Ok(commutant_generator(&k, &basis.generators[0]))
}

/// KFC++ eigenbasis of `K(a)`.
pub fn eigen_generator(
    model: &KoopmanForwardModel,
    a: &[f64],
    opts: EigOptions,
) -> Result<SymmetryGenerator> {
    let k = model.k_of_a(a);
    let dec = eig_with(&k, opts)?;
    let n = dec.dim();
    let inverse_residual =
        fro_norm_c(&(&dec.eigenvectors * &dec.inverse - DMatrix::<Complex64>::identity(n, n)));
    Ok(SymmetryGenerator::Eigenspace {
        u: dec.eigenvectors,
        u_inv: dec.inverse,
        eigenvalues: dec.eigenvalues.iter().copied().collect(),
        inverse_residual,
        condition: dec.condition_estimate,
    })
}

/// `σ(ε) = Re(U diag(ε) U⁻¹)` for the eigenbasis of `K(a)`.
pub fn kfcpp_generator(
    model: &KoopmanForwardModel,
    a: &[f64],
    eps: &[f64],
) -> Result<DMatrix<f64>> {
    eigen_generator(model, a, EigOptions::default())?.eigen_shift(eps, false)
}

fn action_key(a: &[f64]) -> Vec<u64> {
    a.iter().map(|x| x.to_bits()).collect()
}

/// Memo of generators per exact action value; discrete-action datasets hit
/// it on nearly every tuple.
#[derive(Debug, Default, Clone)]
pub struct GeneratorCache {
    commutant: HashMap<Vec<u64>, Option<Arc<SymmetryGenerator>>>,
    eigen: HashMap<Vec<u64>, Option<Arc<SymmetryGenerator>>>,
    pub eig_options: EigOptions,
}

impl GeneratorCache {
    pub fn new(eig_options: EigOptions) -> Self {
        Self {
            eig_options,
            ..Default::default()
        }
    }

    /// `None` when the commutant is empty.
    pub fn commutant(
        &mut self,
        model: &KoopmanForwardModel,
        a: &[f64],
    ) -> Result<Option<Arc<SymmetryGenerator>>> {
        let key = action_key(a);
        if let Some(g) = self.commutant.get(&key) {
            return Ok(g.clone());
        }
        let g = match kfc_generator(model, a) {
            Ok(g) => Some(Arc::new(g)),
            Err(Error::EmptyCommutant) => None,
            Err(e) => return Err(e),
        };
        self.commutant.insert(key, g.clone());
        Ok(g)
    }

    /// `None` when `K(a)` is not (well-conditioned) diagonalizable.
    pub fn eigen(
        &mut self,
        model: &KoopmanForwardModel,
        a: &[f64],
    ) -> Result<Option<Arc<SymmetryGenerator>>> {
        let key = action_key(a);
        if let Some(g) = self.eigen.get(&key) {
            return Ok(g.clone());
        }
        let g = match eigen_generator(model, a, self.eig_options) {
            Ok(g) => Some(Arc::new(g)),
            Err(Error::NonDiagonalizable { .. }) => None,
            Err(e) => return Err(e),
        };
        self.eigen.insert(key, g.clone());
        Ok(g)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::first_row_ansatz;

    fn cartpole_k(a1: bool) -> DMatrix<f64> {
        let (x02, x31) = if a1 { (-0.009, -0.009) } else { (-0.01, -0.01) };
        let x03 = if a1 { 0.0 } else { 0.001 };
        DMatrix::from_row_slice(
            4,
            4,
            &[
                1.0, 0.02, x02, x03, //
                0.0, 1.0, 0.6, 0.8, //
                0.0, 0.0, 1.0, 0.02, //
                0.0, x31, -0.7, -0.2,
            ],
        )
    }

    fn model_of(k: DMatrix<f64>) -> KoopmanForwardModel {
        KoopmanForwardModel::identity(k, vec![]).unwrap()
    }

    #[test]
    fn identity_k_gives_exact_traceless_direction() {
        let m = model_of(DMatrix::identity(3, 3));
        let g = kfc_generator(&m, &[]).unwrap();
        let SymmetryGenerator::Commutant { sigma, residual, degraded } = &g else {
            panic!()
        };
        assert_eq!(*residual, 0.0);
        assert!(!degraded);
        assert!(sigma.trace().abs() < 1e-12);
        let mean = sigma.iter().map(|x| x.abs()).sum::<f64>() / 9.0;
        assert!((mean - 1.0).abs() < 1e-12);
        assert_eq!(kfc_generator(&m, &[]).unwrap(), g);
    }

    #[test]
    fn cartpole_first_row_generators() {
        for (a1, want) in [
            (false, [-2.35, -25.95, -2.0]),
            (true, [-2.60759, -29.0296, -2.22222]),
        ] {
            let m = model_of(cartpole_k(a1));
            let g = kfc_generator_in(&m, &[], &first_row_ansatz(4, 0)).unwrap();
            let SymmetryGenerator::Commutant { sigma, .. } = g else { panic!() };
            let scale = -1.0 / sigma[(0, 0)];
            for (j, w) in want.iter().enumerate() {
                assert!((sigma[(0, j + 1)] * scale - w).abs() < 1e-4, "{a1} {j}");
            }
            for r in 1..4 {
                assert!(sigma.row(r).iter().all(|x| *x == 0.0));
            }
        }
    }

    #[test]
    fn eigen_shift_special_cases() {
        let m = model_of(cartpole_k(false));
        let g = eigen_generator(&m, &[], EigOptions::default()).unwrap();
        assert_eq!(g.eigen_shift(&[0.0; 4], false).unwrap(), DMatrix::zeros(4, 4));
        let c = 0.37;
        let s = g.eigen_shift(&[c; 4], false).unwrap();
        assert!((s - DMatrix::identity(4, 4) * c).norm() < 1e-12);
    }

    #[test]
    fn cartpole_translation_from_unit_eigenvalue() {
        let k = cartpole_k(false);
        let m = model_of(k.clone());
        let g = eigen_generator(&m, &[], EigOptions::default()).unwrap();
        let SymmetryGenerator::Eigenspace { eigenvalues, .. } = &g else { panic!() };
        let i = eigenvalues
            .iter()
            .position(|l| (l - Complex64::new(1.0, 0.0)).norm() < 1e-12)
            .unwrap();
        let e1 = 1e-3;
        let mut eps = [0.0; 4];
        eps[i] = e1;
        let s = g.eigen_shift(&eps, false).unwrap();
        let c = [-2.35, -25.95, -2.0];
        assert!((s[(0, 0)] - e1).abs() < 1e-12);
        for j in 0..3 {
            assert!((s[(0, j + 1)] + e1 * c[j]).abs() < 1e-9, "{}", s);
        }
        for r in 1..4 {
            assert!(s.row(r).iter().all(|x| x.abs() < 1e-15));
        }
    }

    #[test]
    fn tied_conjugates_share_parameter() {
        let k = DMatrix::from_row_slice(3, 3, &[0.9, -0.3, 0.0, 0.3, 0.9, 0.0, 0.0, 0.0, 0.5]);
        let m = model_of(k.clone());
        let g = eigen_generator(&m, &[], EigOptions::default()).unwrap();
        let untied = g.eigen_shift(&[0.1, 0.3, 0.0], false).unwrap();
        let tied = g.eigen_shift(&[0.1, 0.3, 0.0], true).unwrap();
        let same = g.eigen_shift(&[0.1, 0.1, 0.0], false).unwrap();
        assert!((tied - same).norm() < 1e-14);
        assert!(commutator(&untied, &k).norm() < 1e-12);
    }

    #[test]
    fn cache_reuses_generators() {
        let m = KoopmanForwardModel::identity(
            DMatrix::from_row_slice(3, 3, &[0.5, 0.1, 0.0, 0.0, 0.7, 0.2, 0.1, 0.0, 0.9]),
            vec![DMatrix::identity(3, 3) * 0.05],
        )
        .unwrap();
        let mut cache = GeneratorCache::default();
        let a = cache.commutant(&m, &[1.0]).unwrap().unwrap();
        let b = cache.commutant(&m, &[1.0]).unwrap().unwrap();
        assert!(Arc::ptr_eq(&a, &b));
    }
}
