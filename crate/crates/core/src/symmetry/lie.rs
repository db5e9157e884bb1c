//! Numerical checks of the local Lie group axioms for `σ^ε(s) = D((I + εσ)E(s))`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::generator::{kfc_generator, SymmetryGenerator};
use crate::error::{Error, Result};
use crate::koopman::KoopmanForwardModel;

/// Step used for the central difference that estimates `ζ(s) = dσ^ε(s)/dε`.
pub const TAYLOR_STEP: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LieAxiomReport {
    pub eps1: f64,
    pub eps2: f64,
    /// `‖σ⁰(s) − s‖`; the codec roundtrip error.
    pub identity_defect: f64,
    /// `‖D((I+ε₁σ)(I+ε₂σ)E s) − D((I+(ε₁+ε₂)σ)E s)‖`.
    pub composition_defect: f64,
    /// `‖σ^{ε₁}(σ^{ε₂}(s)) − σ^{ε₁+ε₂}(s)‖`, which also carries the roundtrip
    /// error of the inner decode/encode.
    pub state_composition_defect: f64,
    /// `‖σ^{ε₁}(s) − s − ε₁ζ(s)‖`.
    pub taylor_residual: f64,
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

fn flow(sigma: &DMatrix<f64>, eps: f64, z: &DVector<f64>) -> DVector<f64> {
    z + sigma * z * eps
}

/// `σ^ε(s)`.
pub fn transform(
    model: &KoopmanForwardModel,
    sigma: &DMatrix<f64>,
    eps: f64,
    s: &[f64],
) -> Result<Vec<f64>> {
    let z = model.encode(s)?;
    model.decode(&flow(sigma, eps, &z))
}

/// Axiom report for an explicit latent generator.
pub fn lie_axiom_report_with(
    model: &KoopmanForwardModel,
    sigma: &DMatrix<f64>,
    eps1: f64,
    eps2: f64,
    s: &[f64],
) -> Result<LieAxiomReport> {
    let n = model.latent_dim;
    if sigma.shape() != (n, n) {
        return Err(Error::DimensionMismatch(format!(
            "generator is {:?}, latent dimension is {n}",
            sigma.shape()
        )));
    }
    let z = model.encode(s)?;
    let identity = model.decode(&z)?;
    let sum = model.decode(&flow(sigma, eps1 + eps2, &z))?;
    let composed = model.decode(&flow(sigma, eps1, &flow(sigma, eps2, &z)))?;
    let inner = transform(model, sigma, eps2, s)?;
    let state_composed = transform(model, sigma, eps1, &inner)?;

    let h = TAYLOR_STEP;
    let plus = model.decode(&flow(sigma, h, &z))?;
    let minus = model.decode(&flow(sigma, -h, &z))?;
    let shifted = model.decode(&flow(sigma, eps1, &z))?;
    let taylor_residual = shifted
        .iter()
        .zip(s)
        .zip(plus.iter().zip(&minus))
        .map(|((y, x), (p, m))| {
            let zeta = (p - m) / (2.0 * h);
            let r = y - x - eps1 * zeta;
            r * r
        })
        .sum::<f64>()
        .sqrt();

    Ok(LieAxiomReport {
        eps1,
        eps2,
        identity_defect: dist(&identity, s),
        composition_defect: dist(&composed, &sum),
        state_composition_defect: dist(&state_composed, &sum),
        taylor_residual,
    })
}

/// Axiom report for the KFC generator of `K(a)`.
pub fn lie_axiom_report(
    model: &KoopmanForwardModel,
    a: &[f64],
    eps1: f64,
    eps2: f64,
    s: &[f64],
) -> Result<LieAxiomReport> {
    let SymmetryGenerator::Commutant { sigma, .. } = kfc_generator(model, a)? else {
        unreachable!("kfc_generator returns the commutant kind")
    };
    lie_axiom_report_with(model, &sigma, eps1, eps2, s)
}

/// Least-squares slope and intercept of `log y` against `log x`.
pub fn loglog_fit(xs: &[f64], ys: &[f64]) -> Result<(f64, f64)> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return Err(Error::DimensionMismatch("log-log fit needs at least two paired points".into()));
    }
    if xs.iter().chain(ys).any(|v| !(*v > 0.0) || !v.is_finite()) {
        return Err(Error::NonFinite("log-log fit needs positive finite values".into()));
    }
    let lx: Vec<f64> = xs.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|v| v.ln()).collect();
    let n = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxy: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = lx.iter().map(|x| (x - mx) * (x - mx)).sum();
    let slope = sxy / sxx;
    Ok((slope, my - slope * mx))
}

/// Composition scaling with `ε₁ = ε₂ = ε` over `eps`: returns the log-log
/// slope of the defect against `ε` and the fitted `C` in `defect ≈ C·ε₁ε₂`.
pub fn composition_scaling(
    model: &KoopmanForwardModel,
    sigma: &DMatrix<f64>,
    s: &[f64],
    eps: &[f64],
) -> Result<(f64, f64)> {
    let defects = eps
        .iter()
        .map(|e| Ok(lie_axiom_report_with(model, sigma, *e, *e, s)?.composition_defect))
        .collect::<Result<Vec<_>>>()?;
    let (slope, _) = loglog_fit(eps, &defects)?;
    let c = eps
        .iter()
        .zip(&defects)
        .map(|(e, d)| d / (e * e))
        .sum::<f64>()
        / eps.len() as f64;
    Ok((slope, c))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cartpole_sigma0() -> DMatrix<f64> {
        let mut s = DMatrix::zeros(4, 4);
        for (j, v) in [-1.0, -2.35, -25.95, -2.0].iter().enumerate() {
            s[(0, j)] = *v;
        }
        s
    }

    #[test]
    fn zero_parameters_have_no_defect() {
        let m = KoopmanForwardModel::identity(DMatrix::identity(4, 4), vec![]).unwrap();
        let r = lie_axiom_report_with(&m, &cartpole_sigma0(), 0.0, 0.0, &[0.1, -0.2, 0.03, 0.5])
            .unwrap();
        assert_eq!(r.identity_defect, 0.0);
        assert_eq!(r.composition_defect, 0.0);
        assert_eq!(r.state_composition_defect, 0.0);
        assert!(r.taylor_residual < 1e-9);
    }

    #[test]
    fn cartpole_generator_is_idempotent_up_to_sign() {
        let s0 = cartpole_sigma0();
        assert!((&s0 * &s0 + &s0).norm() < 1e-12);
    }

    #[test]
    fn cartpole_composition_defect_is_first_row_quadratic() {
        let m = KoopmanForwardModel::identity(DMatrix::identity(4, 4), vec![]).unwrap();
        let s = [0.1, -0.2, 0.03, 0.5];
        let sigma = cartpole_sigma0();
        let (e1, e2) = (1e-2, 3e-3);
        let r = lie_axiom_report_with(&m, &sigma, e1, e2, &s).unwrap();
        let z = DVector::from_row_slice(&s);
        let want = e1 * e2 * (&sigma * &z).norm();
        assert!((r.composition_defect - want).abs() < 1e-15);
        // with the group law ε₁ + ε₂ − ε₁ε₂ the composition is exact
        let lhs = transform(&m, &sigma, e1, &transform(&m, &sigma, e2, &s).unwrap()).unwrap();
        let rhs = transform(&m, &sigma, e1 + e2 - e1 * e2, &s).unwrap();
        assert!(dist(&lhs, &rhs) < 1e-15);
    }

    #[test]
    fn linear_codec_taylor_residual_vanishes() {
        let m = KoopmanForwardModel::identity(DMatrix::identity(4, 4), vec![]).unwrap();
        let r = lie_axiom_report_with(&m, &cartpole_sigma0(), 1e-2, 0.0, &[1.0, 2.0, 3.0, 4.0])
            .unwrap();
        assert!(r.taylor_residual < 1e-8);
    }

    #[test]
    fn loglog_fit_recovers_power() {
        let xs = [1e-4, 1e-3, 1e-2];
        let ys: Vec<f64> = xs.iter().map(|x| 3.0 * x * x).collect();
        let (slope, icpt) = loglog_fit(&xs, &ys).unwrap();
        assert!((slope - 2.0).abs() < 1e-12);
        assert!((icpt - 3f64.ln()).abs() < 1e-10);
        assert!(loglog_fit(&[1.0], &[1.0]).is_err());
    }
}
