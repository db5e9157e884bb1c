use nalgebra::DMatrix;

use super::{ensure_finite, ensure_square};
use crate::error::Result;

const MAX_TERMS: usize = 30;

fn norm1(m: &DMatrix<f64>) -> f64 {
    m.column_iter()
        .map(|c| c.iter().map(|x| x.abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

/// Matrix exponential by scaling and squaring with a truncated Taylor series.
///
/// The argument is scaled by `2^-s` until its 1-norm is at most 1/2, the series
/// is summed until the next term no longer changes the result in double
/// precision, and the result is squared `s` times.
pub fn matrix_exp(a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    ensure_square(a, "matrix_exp argument")?;
    ensure_finite(a, "matrix_exp argument")?;
    let n = a.nrows();
    let nrm = norm1(a);
    let squarings = if nrm > 0.5 {
        (nrm / 0.5).log2().ceil() as i32
    } else {
        0
    };
    let scaled = a * 2f64.powi(-squarings);

    let mut result = DMatrix::<f64>::identity(n, n);
    let mut term = DMatrix::<f64>::identity(n, n);
    for k in 1..=MAX_TERMS {
        term = &term * &scaled / k as f64;
        result += &term;
        if norm1(&term) <= f64::EPSILON * 1e-2 * norm1(&result) {
            break;
        }
    }
    for _ in 0..squarings {
        result = &result * &result;
    }
    Ok(result)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exp_of_zero_is_identity() {
        let z = DMatrix::<f64>::zeros(3, 3);
        assert_eq!(matrix_exp(&z).unwrap(), DMatrix::identity(3, 3));
    }

    #[test]
    fn exp_of_diagonal() {
        let d = DMatrix::from_diagonal(&nalgebra::DVector::from_vec(vec![1.5, -7.25]));
        let e = matrix_exp(&d).unwrap();
        assert!((e[(0, 0)] - 1.5f64.exp()).abs() <= 1e-12 * 1.5f64.exp());
        assert!((e[(1, 1)] - (-7.25f64).exp()).abs() <= 1e-10 * (-7.25f64).exp());
        assert_eq!(e[(0, 1)], 0.0);
        assert_eq!(e[(1, 0)], 0.0);
    }

    #[test]
    fn rotation_generator() {
        // exp(t·[[0,-1],[1,0]]) is a rotation by t.
        let t = 2.3;
        let a = DMatrix::from_row_slice(2, 2, &[0.0, -t, t, 0.0]);
        let e = matrix_exp(&a).unwrap();
        let want = DMatrix::from_row_slice(2, 2, &[t.cos(), -t.sin(), t.sin(), t.cos()]);
        assert!((e - want).norm() <= 1e-13);
    }

    #[test]
    fn large_norm_nilpotent() {
        // exp(N) = I + N for N² = 0, with ‖N‖ = 10.
        let a = DMatrix::from_row_slice(2, 2, &[0.0, 10.0, 0.0, 0.0]);
        let e = matrix_exp(&a).unwrap();
        let want = DMatrix::from_row_slice(2, 2, &[1.0, 10.0, 0.0, 1.0]);
        assert!((e - &want).norm() <= 1e-10 * want.norm());
    }

    #[test]
    fn rejects_non_finite() {
        let a = DMatrix::from_row_slice(1, 1, &[f64::NAN]);
        assert!(matrix_exp(&a).is_err());
    }
}
