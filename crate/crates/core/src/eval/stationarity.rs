//! The quadratic MSE expansion behind the MMSE estimator.
//!
//! With anchors `Z` (`d x n_tau`, received) and the prior `R_M = I`, the
//! expected error of `M_hat = Z2 A` is, up to scaling,
//!
//! `f(A) = d - 2 Tr(Z A) + Tr(A^T (Z^T Z + lambda I) A)`
//!
//! with `lambda = 2 n_tau sigma^2` as derived for the estimator. A careful
//! derivation with i.i.d. noise gives `lambda = 2 d sigma^2` instead; both
//! constants are reported.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::channel::{snr_to_sigma, transmit, ChannelSpec};
use crate::error::{Error, Result};
use crate::estimators::{estimate_ls, estimate_mmse, mmse_regularizer};
use crate::matrix::FeatureMatrix;
use crate::rng;

const FD_STEP: f64 = 1e-3;

/// Normal quantile for a one-sided 95% test.
const Z_95: f64 = 1.6448536269514722;

/// Value of the expansion at `a` (`n_tau x d`) for ridge weight `lambda`.
pub fn expansion_value(anchors_rx: &DMatrix<f64>, a: &DMatrix<f64>, lambda: f64) -> f64 {
    let d = anchors_rx.nrows() as f64;
    let za = anchors_rx * a;
    let quad = za.norm_squared() + lambda * a.norm_squared();
    d - 2.0 * za.trace() + quad
}

/// `-2 Z^T + 2 (Z^T Z + lambda I) A`.
pub fn expansion_gradient(
    anchors_rx: &DMatrix<f64>,
    a: &DMatrix<f64>,
    lambda: f64,
) -> DMatrix<f64> {
    let zt = anchors_rx.transpose();
    (&zt * (anchors_rx * a) + a * lambda - zt) * 2.0
}

/// Central differences of [`expansion_value`] in every entry of `a`. Each
/// evaluation recomputes only the column of `Z A` the perturbation touches;
/// the function is quadratic, so the step size only affects rounding.
pub fn numerical_expansion_gradient(
    anchors_rx: &DMatrix<f64>,
    a: &DMatrix<f64>,
    lambda: f64,
    step: f64,
) -> DMatrix<f64> {
    let d = anchors_rx.nrows() as f64;
    let za = anchors_rx * a;
    let a_norm2 = a.norm_squared();
    let eval = |i: usize, j: usize, delta: f64| {
        let mut col = a.column(j).into_owned();
        col[i] += delta;
        let new_col = anchors_rx * &col;
        let old_col = za.column(j);
        let quad = za.norm_squared() - old_col.norm_squared() + new_col.norm_squared();
        let trace = za.trace() - za[(j, j)] + new_col[j];
        let reg = a_norm2 - a[(i, j)].powi(2) + (a[(i, j)] + delta).powi(2);
        d - 2.0 * trace + quad + lambda * reg
    };
    DMatrix::from_fn(a.nrows(), a.ncols(), |i, j| {
        (eval(i, j, step) - eval(i, j, -step)) / (2.0 * step)
    })
}

/// Minimizer `(Z^T Z + lambda I)^{-1} Z^T`, via `Z^T (Z Z^T + lambda I)^{-1}`.
fn optimum(anchors_rx: &DMatrix<f64>, lambda: f64) -> Option<DMatrix<f64>> {
    let d = anchors_rx.nrows();
    let system = anchors_rx * anchors_rx.transpose() + DMatrix::identity(d, d) * lambda;
    let chol = system.cholesky()?;
    Some(chol.solve(anchors_rx).transpose())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StationarityReport {
    pub d: usize,
    pub n_tau: usize,
    pub sigma: f64,
    /// `2 n_tau sigma^2`.
    pub lambda: f64,
    /// Norms of the central-difference gradient of the expansion.
    pub gradient_norm_at_optimum: f64,
    pub gradient_norm_at_zero: f64,
    /// Ratio of the two norms above.
    pub relative_gradient_norm: f64,
    /// The same ratio from the closed-form gradient.
    pub analytic_relative_gradient_norm: f64,
    /// `2 d sigma^2`.
    pub lambda_alternative: f64,
    /// Relative gradient of the implemented expansion at the optimum of the
    /// alternative constant; nonzero whenever `n_tau != d` and `sigma > 0`.
    pub relative_gradient_norm_alternative: f64,
    /// `lambda - lambda_alternative`.
    pub residual_constant: f64,
    pub value_at_optimum: f64,
    /// Expansion value at the least-squares analogue `Z^T (Z Z^T)^{-1}`.
    pub value_at_ls: Option<f64>,
}

pub fn mmse_stationarity_check(
    anchors_rx: &FeatureMatrix,
    sigma: f64,
) -> Result<StationarityReport> {
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(Error::Validation(format!(
            "sigma must be finite and >= 0, got {sigma}"
        )));
    }
    let z = anchors_rx.as_matrix();
    let (d, n_tau) = z.shape();
    let lambda = mmse_regularizer(sigma, n_tau);
    let lambda_alternative = 2.0 * d as f64 * sigma * sigma;
    let singular = || Error::Singular {
        context: "mmse_stationarity_check",
        condition: f64::INFINITY,
        advice: "; anchors need full row rank when sigma = 0",
    };
    let a_star = optimum(z, lambda).ok_or_else(singular)?;
    let a_alt = optimum(z, lambda_alternative).ok_or_else(singular)?;
    let zero = DMatrix::zeros(n_tau, d);
    let numerical = |a: &DMatrix<f64>| numerical_expansion_gradient(z, a, lambda, FD_STEP).norm();
    let at_zero = numerical(&zero);
    if at_zero == 0.0 {
        return Err(Error::DegenerateFeature {
            what: "anchor ensemble",
            index: 0,
        });
    }
    let at_star = numerical(&a_star);
    let at_alt = numerical(&a_alt);
    let analytic =
        expansion_gradient(z, &a_star, lambda).norm() / expansion_gradient(z, &zero, lambda).norm();
    Ok(StationarityReport {
        d,
        n_tau,
        sigma,
        lambda,
        gradient_norm_at_optimum: at_star,
        gradient_norm_at_zero: at_zero,
        relative_gradient_norm: at_star / at_zero,
        analytic_relative_gradient_norm: analytic,
        lambda_alternative,
        relative_gradient_norm_alternative: at_alt / at_zero,
        residual_constant: lambda - lambda_alternative,
        value_at_optimum: expansion_value(z, &a_star, lambda),
        value_at_ls: optimum(z, 0.0).map(|a| expansion_value(z, &a, lambda)),
    })
}

/// Received unit-power Gaussian anchors: `Z + eps`.
pub fn sample_ensemble(d: usize, n_tau: usize, sigma: f64, seed: u64) -> Result<FeatureMatrix> {
    let z = FeatureMatrix::new(rng::gaussian_matrix(
        d,
        n_tau,
        1.0,
        &mut rng::stream(seed, 0),
    ));
    Ok(transmit(&z, &ChannelSpec::from_sigma(sigma, seed)?, 1))
}

/// Frobenius errors of each estimator in one draw from the prior.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PriorTrial {
    pub ls: f64,
    pub mmse: f64,
    /// MMSE with the `2 d sigma^2` ridge weight.
    pub mmse_alternative: f64,
}

/// One Monte Carlo draw: `M` with i.i.d. `N(0, 1/d)` entries (so `R_M = I`
/// after scaling), unit-power anchors, both anchor sets sent through the
/// channel with independent noise.
pub fn prior_trial(d: usize, n_tau: usize, snr_db: f64, seed: u64) -> Result<PriorTrial> {
    let mut r = rng::stream(seed, 0);
    let m = rng::gaussian_matrix(d, d, 1.0 / (d as f64).sqrt(), &mut r);
    let z1 = FeatureMatrix::new(rng::gaussian_matrix(d, n_tau, 1.0, &mut r));
    let z2 = FeatureMatrix::new(&m * z1.as_matrix());
    let sigma = snr_to_sigma(snr_db);
    let ch = ChannelSpec::from_sigma(sigma, rng::derive_seed(seed, 1))?;
    let (rx1, rx2) = (transmit(&z1, &ch, 0), transmit(&z2, &ch, 1));
    let err = |est: &DMatrix<f64>| (est - &m).norm();
    let ls = estimate_ls(&rx1, &rx2)?;
    let mmse = estimate_mmse(&rx1, &rx2, sigma, n_tau)?;
    // 2 n_tau s^2 = 2 d sigma^2 for s = sigma sqrt(d / n_tau).
    let alt = estimate_mmse(&rx1, &rx2, sigma * (d as f64 / n_tau as f64).sqrt(), n_tau)?;
    Ok(PriorTrial {
        ls: err(ls.matrix().expect("linear")),
        mmse: err(mmse.matrix().expect("linear")),
        mmse_alternative: err(alt.matrix().expect("linear")),
    })
}

/// Paired one-sided comparison of `a` against `b` (normal approximation).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OneSidedTest {
    pub trials: usize,
    pub mean_a: f64,
    pub mean_b: f64,
    /// Mean of `a - b`.
    pub mean_diff: f64,
    pub std_error: f64,
    /// 95% upper confidence bound on the mean difference.
    pub upper_95: f64,
    /// `a <= b` is supported at the 95% level only if `upper_95 <= 0`.
    pub a_not_above_b: bool,
}

pub fn paired_one_sided(a: &[f64], b: &[f64]) -> Result<OneSidedTest> {
    if a.len() != b.len() || a.len() < 2 {
        return Err(Error::Validation(
            "paired test needs two equal samples of size >= 2".into(),
        ));
    }
    let n = a.len() as f64;
    let diffs: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let mean_diff = diffs.iter().sum::<f64>() / n;
    let var = diffs.iter().map(|v| (v - mean_diff).powi(2)).sum::<f64>() / (n - 1.0);
    let std_error = (var / n).sqrt();
    let upper_95 = mean_diff + Z_95 * std_error;
    Ok(OneSidedTest {
        trials: a.len(),
        mean_a: a.iter().sum::<f64>() / n,
        mean_b: b.iter().sum::<f64>() / n,
        mean_diff,
        std_error,
        upper_95,
        a_not_above_b: upper_95 <= 0.0,
    })
}
