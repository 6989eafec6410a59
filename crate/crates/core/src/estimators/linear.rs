use nalgebra::DMatrix;

use super::{check_pair, mean_residual, AlignmentMap, AlignmentTransform, EstimatorKind};
use crate::error::{Error, Result};
use crate::matrix::FeatureMatrix;

/// Smallest admissible ratio of extreme eigenvalues of a symmetric system.
pub const CONDITION_GUARD: f64 = 1e-10;

/// Ridge weight of the MMSE estimator: `2 n_tau sigma^2`.
pub fn mmse_regularizer(sigma: f64, n_tau: usize) -> f64 {
    2.0 * n_tau as f64 * sigma * sigma
}

/// Solves `system * X = rhs` for symmetric positive (semi)definite `system`
/// after checking its conditioning.
fn guarded_spd_solve(
    system: DMatrix<f64>,
    rhs: &DMatrix<f64>,
    context: &'static str,
    advice: &'static str,
) -> Result<DMatrix<f64>> {
    let eig = system.clone().symmetric_eigenvalues();
    let max = eig.max();
    let min = eig.min();
    if !(max > 0.0) || min <= CONDITION_GUARD * max {
        let condition = if min > 0.0 { max / min } else { f64::INFINITY };
        return Err(Error::Singular {
            context,
            condition,
            advice,
        });
    }
    let chol = system.cholesky().ok_or(Error::Singular {
        context,
        condition: max / min,
        advice,
    })?;
    Ok(chol.solve(rhs))
}

/// Least-squares map `Z2 Z1^T (Z1 Z1^T)^{-1}`.
///
/// Pass received anchors for the deployed pipeline or clean transmitter
/// anchors to evaluate the noiseless-design form.
pub fn estimate_ls(
    anchors_tx: &FeatureMatrix,
    anchors_ref: &FeatureMatrix,
) -> Result<AlignmentMap> {
    check_pair(anchors_tx, anchors_ref, "estimate_ls")?;
    let x = anchors_tx.as_matrix();
    let y = anchors_ref.as_matrix();
    let gram = x * x.transpose();
    let cross = x * y.transpose();
    let mt = guarded_spd_solve(
        gram,
        &cross,
        "estimate_ls",
        "; anchors must have full row rank and n_tau >= d",
    )?;
    let m = mt.transpose();
    let fit_residual = mean_residual(&(&m * x), y);
    Ok(AlignmentMap {
        estimator: EstimatorKind::Ls,
        transform: AlignmentTransform::Linear(m),
        sigma_used: 0.0,
        n_tau_used: anchors_tx.len(),
        fit_residual,
        loss_trace: Vec::new(),
    })
}

/// Linear MMSE map `Z2 (Z1^T Z1 + 2 n_tau sigma^2 I)^{-1} Z1^T`, evaluated
/// through the equivalent `d x d` system
/// `Z2 Z1^T (Z1 Z1^T + 2 n_tau sigma^2 I)^{-1}`.
pub fn estimate_mmse(
    anchors_tx_rx: &FeatureMatrix,
    anchors_ref_rx: &FeatureMatrix,
    sigma: f64,
    n_tau: usize,
) -> Result<AlignmentMap> {
    check_pair(anchors_tx_rx, anchors_ref_rx, "estimate_mmse")?;
    validate_noise(sigma, n_tau, anchors_tx_rx)?;
    let x = anchors_tx_rx.as_matrix();
    let y = anchors_ref_rx.as_matrix();
    let d = x.nrows();
    let system = x * x.transpose() + DMatrix::identity(d, d) * mmse_regularizer(sigma, n_tau);
    let cross = x * y.transpose();
    let mt = guarded_spd_solve(
        system,
        &cross,
        "estimate_mmse",
        "; with sigma = 0 use estimate_ls on full-rank anchors",
    )?;
    let m = mt.transpose();
    let fit_residual = mean_residual(&(&m * x), y);
    Ok(AlignmentMap {
        estimator: EstimatorKind::Mmse,
        transform: AlignmentTransform::Linear(m),
        sigma_used: sigma,
        n_tau_used: n_tau,
        fit_residual,
        loss_trace: Vec::new(),
    })
}

/// The same MMSE map computed literally through the `n_tau x n_tau` system.
/// Slower; kept as an independent route for cross-checking.
pub fn estimate_mmse_sample_form(
    anchors_tx_rx: &FeatureMatrix,
    anchors_ref_rx: &FeatureMatrix,
    sigma: f64,
    n_tau: usize,
) -> Result<DMatrix<f64>> {
    check_pair(anchors_tx_rx, anchors_ref_rx, "estimate_mmse_sample_form")?;
    validate_noise(sigma, n_tau, anchors_tx_rx)?;
    let x = anchors_tx_rx.as_matrix();
    let n = x.ncols();
    let system = x.transpose() * x + DMatrix::identity(n, n) * mmse_regularizer(sigma, n_tau);
    let a = guarded_spd_solve(
        system,
        &x.transpose(),
        "estimate_mmse_sample_form",
        "; use the d x d form",
    )?;
    Ok(anchors_ref_rx.as_matrix() * a)
}

fn validate_noise(sigma: f64, n_tau: usize, anchors: &FeatureMatrix) -> Result<()> {
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(Error::Validation(format!(
            "sigma must be finite and >= 0, got {sigma}"
        )));
    }
    if n_tau != anchors.len() {
        return Err(Error::DimensionMismatch {
            context: "estimate_mmse n_tau",
            expected: anchors.len(),
            actual: n_tau,
        });
    }
    Ok(())
}
