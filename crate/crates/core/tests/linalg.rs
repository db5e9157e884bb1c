use kfc_core::linalg::{commutant_basis, commutator, eig, lstsq, matrix_exp, sylvester_operator};
use kfc_core::rng;
use kfc_core::{Complex64, DMatrix};
use proptest::prelude::*;
use rand::Rng;
use rand_distr::StandardNormal;

fn gaussian(n: usize, m: usize, seed: u64) -> DMatrix<f64> {
    let mut r = rng::seeded(seed);
    DMatrix::from_fn(n, m, |_, _| r.sample::<f64, _>(StandardNormal))
}

#[test]
fn eig_reconstructs_random_matrices() {
    let mut r = rng::seeded(42);
    for trial in 0..100 {
        let n = r.random_range(2..=32);
        let k = gaussian(n, n, 1000 + trial);
        let dec = eig(&k).unwrap();
        let rec = dec.reconstruct().map(|z| z.re);
        let rel = (&rec - &k).norm() / k.norm();
        assert!(rel <= 1e-8 * dec.condition_estimate.max(1.0), "trial {trial} n {n}: {rel}");
        let imag = dec.reconstruct().map(|z| z.im).norm();
        assert!(imag <= 1e-8 * k.norm() * dec.condition_estimate, "imaginary residue {imag}");
    }
}

#[test]
fn eig_of_known_spectrum() {
    // similarity transform of diag(3, −1, 0.5)
    let p = DMatrix::from_row_slice(3, 3, &[1.0, 2.0, 0.0, 0.0, 1.0, 1.0, 1.0, 0.0, 1.0]);
    let d = DMatrix::from_diagonal(&nalgebra::DVector::from_row_slice(&[3.0, -1.0, 0.5]));
    let k = &p * d * p.clone().try_inverse().unwrap();
    let dec = eig(&k).unwrap();
    let want = [3.0, 0.5, -1.0];
    for (l, w) in dec.eigenvalues.iter().zip(want) {
        assert!((l - Complex64::new(w, 0.0)).norm() < 1e-10, "{l} vs {w}");
    }
}

#[test]
fn sylvester_operator_vectorizes_commutator() {
    let k = gaussian(4, 4, 3);
    let s = gaussian(4, 4, 4);
    let t = sylvester_operator(&k);
    let vec_s = nalgebra::DVector::from_column_slice(s.as_slice());
    let lhs = &t * vec_s;
    let c = commutator(&s, &k);
    let rhs = nalgebra::DVector::from_column_slice(c.as_slice());
    assert!((lhs + rhs).norm() < 1e-12);
}

#[test]
fn expm_inverse_and_commuting_sum() {
    for seed in 0..20 {
        let a = gaussian(5, 5, seed) * 0.7;
        let b = &a * 0.3 + DMatrix::identity(5, 5) * 0.2;
        let ea = matrix_exp(&a).unwrap();
        let e_neg = matrix_exp(&(-&a)).unwrap();
        assert!((&ea * &e_neg - DMatrix::identity(5, 5)).norm() < 1e-10);
        let lhs = matrix_exp(&(&a + &b)).unwrap();
        let rhs = &ea * matrix_exp(&b).unwrap();
        assert!((&lhs - &rhs).norm() / lhs.norm() < 1e-11, "seed {seed}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn commutant_generators_commute(seed in 0u64..10_000, n in 2usize..7) {
        let k = gaussian(n, n, seed);
        match commutant_basis(&k, &[DMatrix::identity(n, n)]) {
            Ok(basis) => {
                for g in &basis.generators {
                    let c = commutator(g, &k).norm();
                    prop_assert!(c <= 1e-8 * k.norm() * g.norm(), "residual {}", c);
                }
                prop_assert_eq!(basis.generators.len(), n - 1);
            }
            Err(e) => prop_assert!(false, "{}", e),
        }
    }

    #[test]
    fn lstsq_solves_normal_equations(seed in 0u64..10_000, rows in 6usize..40, cols in 1usize..6) {
        let a = gaussian(rows, cols, seed);
        let b = gaussian(rows, 2, seed + 1);
        let x = lstsq(&a, &b).unwrap();
        let normal = a.transpose() * (&a * &x - &b);
        prop_assert!(normal.norm() <= 1e-9 * (a.norm().powi(2) * x.norm() + a.norm() * b.norm()));
    }

    #[test]
    fn expm_of_diagonal_is_elementwise(d in proptest::collection::vec(-5.0f64..5.0, 1..8)) {
        let m = DMatrix::from_diagonal(&nalgebra::DVector::from_vec(d.clone()));
        let e = matrix_exp(&m).unwrap();
        for (i, v) in d.iter().enumerate() {
            prop_assert!((e[(i, i)] - v.exp()).abs() <= 1e-12 * v.exp().max(1.0));
        }
    }
}
