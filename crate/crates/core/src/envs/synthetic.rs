use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use super::Env;
use crate::dataset::{Dataset, TransitionTuple};
use crate::error::{Error, Result};
use crate::linalg::ensure_square;
use crate::rng;

pub const SYNTHETIC_NAME: &str = "synthetic-bilinear";

/// Largest spectral radius of `K(a)` allowed over the action box.
pub const STABILITY_LIMIT: f64 = 1.05;

/// Exact bilinear dynamics `s' = (K₀ + Σ aᵢKᵢ)s` with actions in `[−1, 1]^m`.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticBilinearEnv {
    pub k0: DMatrix<f64>,
    pub k_forcing: Vec<DMatrix<f64>>,
    pub seed: u64,
}

fn spectral_radius(k: &DMatrix<f64>) -> f64 {
    k.complex_eigenvalues()
        .iter()
        .map(|l| l.norm())
        .fold(0.0, f64::max)
}

impl SyntheticBilinearEnv {
    /// Rejects systems whose spectral radius exceeds [`STABILITY_LIMIT`] at
    /// any corner of the action box (or at `a = 0`).
    pub fn new(k0: DMatrix<f64>, k_forcing: Vec<DMatrix<f64>>, seed: u64) -> Result<Self> {
        ensure_square(&k0, "K0")?;
        let n = k0.nrows();
        if k_forcing.iter().any(|k| k.shape() != (n, n)) {
            return Err(Error::DimensionMismatch("forcing matrices must match K0".into()));
        }
        if k_forcing.len() > 16 {
            return Err(Error::Config("at most 16 action dimensions".into()));
        }
        let env = Self {
            k0,
            k_forcing,
            seed,
        };
        let radius = env.max_spectral_radius();
        if !(radius <= STABILITY_LIMIT) {
            return Err(Error::Unstable {
                radius,
                limit: STABILITY_LIMIT,
            });
        }
        Ok(env)
    }

    /// Random stable system: `K₀` has spectral radius 0.95 and each `Kᵢ`
    /// is a small perturbation, shrunk until the guard holds.
    pub fn random(n: usize, m: usize, seed: u64) -> Result<Self> {
        if n == 0 {
            return Err(Error::Empty("state dimension".into()));
        }
        let mut rng = rng::seeded(seed);
        let mut gauss = |r: usize, c: usize| {
            DMatrix::from_fn(r, c, |_, _| rng.sample::<f64, _>(StandardNormal))
        };
        let raw = gauss(n, n);
        let k0 = &raw * (0.95 / spectral_radius(&raw).max(1e-12));
        let mut forcing: Vec<DMatrix<f64>> = (0..m)
            .map(|_| gauss(n, n) * (0.05 / (n as f64).sqrt()))
            .collect();
        loop {
            match Self::new(k0.clone(), forcing.clone(), seed) {
                Err(Error::Unstable { .. }) => forcing.iter_mut().for_each(|k| *k *= 0.5),
                other => return other,
            }
        }
    }

    pub fn k_of_a(&self, a: &[f64]) -> DMatrix<f64> {
        let mut k = self.k0.clone();
        for (ai, ki) in a.iter().zip(&self.k_forcing) {
            k += ki * *ai;
        }
        k
    }

    fn max_spectral_radius(&self) -> f64 {
        let m = self.k_forcing.len();
        let mut radius = spectral_radius(&self.k0);
        for mask in 0..(1u32 << m) {
            let a: Vec<f64> = (0..m)
                .map(|i| if mask >> i & 1 == 1 { 1.0 } else { -1.0 })
                .collect();
            radius = radius.max(spectral_radius(&self.k_of_a(&a)));
        }
        radius
    }

    /// `episodes` trajectories of `steps` transitions with Gaussian initial
    /// states and uniform actions; rewards are 0.
    pub fn collect(&self, episodes: usize, steps: usize) -> Dataset {
        let n = self.state_dim();
        let m = self.action_dim();
        let rollouts: Vec<Vec<TransitionTuple>> = (0..episodes)
            .into_par_iter()
            .map(|ep| {
                let mut rng = rng::stream(self.seed, ep as u64 + 1);
                let mut s = self.reset(&mut rng);
                let mut out = Vec::with_capacity(steps);
                for _ in 0..steps {
                    let a: Vec<f64> = (0..m).map(|_| rng.random_range(-1.0..=1.0)).collect();
                    let next = self.step(&s, &a);
                    out.push(TransitionTuple {
                        state: s,
                        action: a,
                        reward: 0.0,
                        next_state: next.clone(),
                    });
                    s = next;
                }
                out
            })
            .collect();
        let mut ds = Dataset::new(n, m).with_provenance(
            SYNTHETIC_NAME,
            self.seed,
            self.position_indices(),
            self.velocity_indices(),
        );
        for t in rollouts.iter().flatten() {
            ds.push(t).expect("synthetic dims");
        }
        ds
    }
}

impl Env for SyntheticBilinearEnv {
    fn name(&self) -> &str {
        SYNTHETIC_NAME
    }

    fn state_dim(&self) -> usize {
        self.k0.nrows()
    }

    fn action_dim(&self) -> usize {
        self.k_forcing.len()
    }

    /// Every coordinate counts as a position.
    fn position_indices(&self) -> Vec<usize> {
        (0..self.state_dim()).collect()
    }

    fn velocity_indices(&self) -> Vec<usize> {
        Vec::new()
    }

    fn step(&self, s: &[f64], a: &[f64]) -> Vec<f64> {
        (self.k_of_a(a) * DVector::from_row_slice(s)).as_slice().to_vec()
    }

    fn is_terminal(&self, _s: &[f64]) -> bool {
        false
    }

    fn reset<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        (0..self.state_dim())
            .map(|_| rng.sample::<f64, _>(StandardNormal))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::koopman::fit_linear;

    #[test]
    fn geometric_decay() {
        let env = SyntheticBilinearEnv::new(DMatrix::identity(3, 3) * 0.9, vec![], 0).unwrap();
        let s = env.step(&env.step(&[1.0, -2.0, 4.0], &[]), &[]);
        let want = [0.81, -1.62, 3.24];
        for (x, w) in s.iter().zip(want) {
            assert!((x - w).abs() < 1e-15);
        }
    }

    #[test]
    fn identity_is_constant() {
        let env = SyntheticBilinearEnv::new(DMatrix::identity(2, 2), vec![], 0).unwrap();
        let ds = env.collect(1, 5);
        for t in ds.iter() {
            assert_eq!(t.state, t.next_state);
        }
    }

    #[test]
    fn unstable_rejected() {
        let err = SyntheticBilinearEnv::new(DMatrix::identity(2, 2) * 1.2, vec![], 0);
        assert!(matches!(err, Err(Error::Unstable { .. })));
        let err = SyntheticBilinearEnv::new(
            DMatrix::identity(2, 2),
            vec![DMatrix::identity(2, 2) * 0.2],
            0,
        );
        assert!(matches!(err, Err(Error::Unstable { .. })));
    }

    #[test]
    fn fit_linear_recovers_random_system() {
        let env = SyntheticBilinearEnv::random(4, 2, 11).unwrap();
        let ds = env.collect(20, 20);
        let model = fit_linear(&ds).unwrap();
        assert!((&model.k0 - &env.k0).norm() < 1e-8);
        for (a, b) in model.k_forcing.iter().zip(&env.k_forcing) {
            assert!((a - b).norm() < 1e-8);
        }
    }
}
