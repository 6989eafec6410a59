//! Metrics, bound checks and runtime measurements.

mod bench;
mod bound;
mod stationarity;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimators::AlignmentMap;
use crate::features::GroundTruthTransform;
use crate::matrix::inf_norm;

pub use bench::{
    benchmark_interleaved, benchmark_runtime, BenchOperation, EnvironmentFingerprint,
    RuntimeRecord, MIN_REPETITIONS,
};
pub use bound::{
    check_prop1_bound, estimate_lipschitz, gaussian_max_factor, BoundReport, LipschitzEstimate,
};
pub use stationarity::{
    expansion_gradient, expansion_value, mmse_stationarity_check, numerical_expansion_gradient,
    paired_one_sided, prior_trial, sample_ensemble, OneSidedTest, PriorTrial, StationarityReport,
};

/// Fraction of predictions equal to their label.
pub fn top1_accuracy(predictions: &[usize], labels: &[usize]) -> Result<f64> {
    if predictions.len() != labels.len() {
        return Err(Error::DimensionMismatch {
            context: "top1_accuracy",
            expected: labels.len(),
            actual: predictions.len(),
        });
    }
    if labels.is_empty() {
        return Err(Error::Validation("top1_accuracy of an empty set".into()));
    }
    let hits = predictions
        .iter()
        .zip(labels)
        .filter(|(p, y)| p == y)
        .count();
    Ok(hits as f64 / labels.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AlignmentError {
    pub frobenius: f64,
    /// Induced infinity norm (max absolute row sum) of `M_hat - M`.
    pub inf: f64,
}

/// Distance between an estimated linear map and the ground truth.
pub fn alignment_error(map: &AlignmentMap, truth: &GroundTruthTransform) -> Result<AlignmentError> {
    let m = map
        .matrix()
        .ok_or_else(|| Error::Validation("alignment_error needs a linear map".into()))?;
    if m.shape() != truth.matrix.shape() {
        return Err(Error::DimensionMismatch {
            context: "alignment_error",
            expected: truth.dim(),
            actual: m.nrows(),
        });
    }
    let diff = m - &truth.matrix;
    Ok(AlignmentError {
        frobenius: diff.norm(),
        inf: inf_norm(&diff),
    })
}
