use nalgebra::{DMatrix, SVD};

use crate::error::{Error, Result};

/// Relative singular value cutoff of the pseudoinverse.
pub const LSTSQ_CUTOFF: f64 = 1e-12;

/// Minimum-norm least squares solution of `A X = B`.
pub fn lstsq(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    lstsq_with_rank(a, b).map(|(x, _)| x)
}

/// As [`lstsq`], also returning the numerical rank of `A`.
pub fn lstsq_with_rank(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<(DMatrix<f64>, usize)> {
    if a.nrows() != b.nrows() {
        return Err(Error::DimensionMismatch(format!(
            "lstsq: A has {} rows, B has {}",
            a.nrows(),
            b.nrows()
        )));
    }
    if a.is_empty() {
        return Ok((DMatrix::zeros(a.ncols(), b.ncols()), 0));
    }
    let svd = SVD::new(a.clone(), true, true);
    let u = svd.u.as_ref().expect("u requested");
    let v_t = svd.v_t.as_ref().expect("v_t requested");
    let smax = svd.singular_values.max();
    let cutoff = LSTSQ_CUTOFF * smax;

    // X = V Σ⁺ Uᵀ B
    let mut utb = u.transpose() * b;
    let mut rank = 0;
    for (i, &s) in svd.singular_values.iter().enumerate() {
        if s > cutoff && s > 0.0 {
            rank += 1;
            utb.row_mut(i).scale_mut(1.0 / s);
        } else {
            utb.row_mut(i).fill(0.0);
        }
    }
    Ok((v_t.transpose() * utb, rank))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand_distr::StandardNormal;

    use crate::rng::seeded;

    fn randn(rows: usize, cols: usize, rng: &mut crate::rng::Rng) -> DMatrix<f64> {
        DMatrix::from_fn(rows, cols, |_, _| rng.sample(StandardNormal))
    }

    #[test]
    fn identity_system() {
        let b = DMatrix::from_row_slice(3, 2, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let x = lstsq(&DMatrix::identity(3, 3), &b).unwrap();
        assert!((x - b).norm() <= 1e-14);
    }

    #[test]
    fn consistent_overdetermined() {
        let mut rng = seeded(1);
        let a = randn(30, 5, &mut rng);
        let x0 = randn(5, 2, &mut rng);
        let b = &a * &x0;
        let x = lstsq(&a, &b).unwrap();
        assert!((&a * &x - &b).norm() <= 1e-10);
        assert!((x - x0).norm() <= 1e-10);
    }

    #[test]
    fn noisy_recovery_and_stationarity() {
        let mut rng = seeded(7);
        let a = randn(50, 4, &mut rng);
        let x0 = randn(4, 3, &mut rng);
        let noise = randn(50, 3, &mut rng) * 1e-6;
        let b = &a * &x0 + noise;
        let x = lstsq(&a, &b).unwrap();
        assert!((&x - &x0).norm() <= 1e-4);

        let base = (&a * &x - &b).norm();
        for _ in 0..200 {
            let mut d = randn(4, 3, &mut rng);
            d *= 1e-6 / d.norm();
            let perturbed = (&a * (&x + d) - &b).norm();
            assert!(perturbed >= base - 1e-14, "{perturbed} < {base}");
        }
    }

    #[test]
    fn rank_deficient_min_norm() {
        // Two identical columns: the minimum norm solution splits evenly.
        let a = DMatrix::from_row_slice(3, 2, &[1.0, 1.0, 2.0, 2.0, 3.0, 3.0]);
        let b = DMatrix::from_row_slice(3, 1, &[2.0, 4.0, 6.0]);
        let (x, rank) = lstsq_with_rank(&a, &b).unwrap();
        assert_eq!(rank, 1);
        assert!((x[(0, 0)] - 1.0).abs() < 1e-12);
        assert!((x[(1, 0)] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn row_mismatch_is_error() {
        let a = DMatrix::<f64>::zeros(3, 2);
        let b = DMatrix::<f64>::zeros(4, 1);
        assert!(lstsq(&a, &b).is_err());
    }
}
