//! Server-side estimation of the linear map between two feature spaces from
//! received anchor features, and its application at inference time.
//!
//! Anchor matrices are `d x n_tau`: column `j` of the transmitting system's
//! anchors corresponds to column `j` of the reference system's anchors.

mod learned;
mod linear;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::{row_major, FeatureMatrix};
use crate::nn::Mlp;

pub use learned::{estimate_ft, estimate_gd, linear_residual_gradient, GdConfig, GdInit};
pub use linear::{
    estimate_ls, estimate_mmse, estimate_mmse_sample_form, mmse_regularizer, CONDITION_GUARD,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EstimatorKind {
    Ls,
    Mmse,
    GdLinear,
    FtNonlinear,
}

impl EstimatorKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            EstimatorKind::Ls => "ls",
            EstimatorKind::Mmse => "mmse",
            EstimatorKind::GdLinear => "gd-linear",
            EstimatorKind::FtNonlinear => "ft-nonlinear",
        }
    }
}

/// The estimated transform: a matrix for linear estimators, a small
/// network for the fine-tuning baseline.
#[derive(Debug, Clone, PartialEq)]
pub enum AlignmentTransform {
    Linear(DMatrix<f64>),
    Network(Mlp),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "AlignmentWire", into = "AlignmentWire")]
pub struct AlignmentMap {
    pub estimator: EstimatorKind,
    pub transform: AlignmentTransform,
    pub sigma_used: f64,
    pub n_tau_used: usize,
    /// Mean squared anchor residual `(1/n_tau) sum |z2 - T(z1)|^2`.
    pub fit_residual: f64,
    /// Per-epoch training loss for iterative estimators.
    pub loss_trace: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct AlignmentWire {
    estimator: EstimatorKind,
    d: usize,
    #[serde(
        default,
        skip_serializing_if = "Option::is_none",
        with = "opt_row_major"
    )]
    matrix: Option<DMatrix<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    network: Option<Mlp>,
    sigma_used: f64,
    n_tau_used: usize,
    fit_residual: f64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    loss_trace: Vec<f64>,
}

mod opt_row_major {
    use super::*;
    use serde::{Deserializer, Serializer};

    pub fn serialize<S: Serializer>(
        m: &Option<DMatrix<f64>>,
        s: S,
    ) -> std::result::Result<S::Ok, S::Error> {
        match m {
            Some(m) => row_major::serialize(m, s),
            None => s.serialize_none(),
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(
        de: D,
    ) -> std::result::Result<Option<DMatrix<f64>>, D::Error> {
        row_major::deserialize(de).map(Some)
    }
}

impl TryFrom<AlignmentWire> for AlignmentMap {
    type Error = Error;

    fn try_from(w: AlignmentWire) -> Result<Self> {
        let transform = match (w.matrix, w.network) {
            (Some(m), None) => {
                if m.nrows() != w.d || m.ncols() != w.d {
                    return Err(Error::DimensionMismatch {
                        context: "alignment map matrix",
                        expected: w.d,
                        actual: m.nrows(),
                    });
                }
                if m.iter().any(|v| !v.is_finite()) {
                    return Err(Error::Validation(
                        "alignment matrix has non-finite entries".into(),
                    ));
                }
                AlignmentTransform::Linear(m)
            }
            (None, Some(net)) => AlignmentTransform::Network(net),
            _ => {
                return Err(Error::Validation(
                    "alignment map needs exactly one of matrix or network".into(),
                ))
            }
        };
        if (w.estimator == EstimatorKind::FtNonlinear)
            != matches!(transform, AlignmentTransform::Network(_))
        {
            return Err(Error::Validation(
                "only ft-nonlinear maps store a network".into(),
            ));
        }
        Ok(AlignmentMap {
            estimator: w.estimator,
            transform,
            sigma_used: w.sigma_used,
            n_tau_used: w.n_tau_used,
            fit_residual: w.fit_residual,
            loss_trace: w.loss_trace,
        })
    }
}

impl From<AlignmentMap> for AlignmentWire {
    fn from(m: AlignmentMap) -> Self {
        let d = m.input_dim();
        let (matrix, network) = match m.transform {
            AlignmentTransform::Linear(x) => (Some(x), None),
            AlignmentTransform::Network(n) => (None, Some(n)),
        };
        AlignmentWire {
            estimator: m.estimator,
            d,
            matrix,
            network,
            sigma_used: m.sigma_used,
            n_tau_used: m.n_tau_used,
            fit_residual: m.fit_residual,
            loss_trace: m.loss_trace,
        }
    }
}

impl AlignmentMap {
    /// Wraps a known matrix, e.g. the ground truth or the identity.
    pub fn from_matrix(estimator: EstimatorKind, matrix: DMatrix<f64>) -> Self {
        AlignmentMap {
            estimator,
            transform: AlignmentTransform::Linear(matrix),
            sigma_used: 0.0,
            n_tau_used: 0,
            fit_residual: 0.0,
            loss_trace: Vec::new(),
        }
    }

    pub fn identity(d: usize) -> Self {
        Self::from_matrix(EstimatorKind::Ls, DMatrix::identity(d, d))
    }

    pub fn matrix(&self) -> Option<&DMatrix<f64>> {
        match &self.transform {
            AlignmentTransform::Linear(m) => Some(m),
            AlignmentTransform::Network(_) => None,
        }
    }

    pub fn input_dim(&self) -> usize {
        match &self.transform {
            AlignmentTransform::Linear(m) => m.ncols(),
            AlignmentTransform::Network(n) => n.input_dim(),
        }
    }

    pub fn output_dim(&self) -> usize {
        match &self.transform {
            AlignmentTransform::Linear(m) => m.nrows(),
            AlignmentTransform::Network(n) => n.output_dim(),
        }
    }
}

/// Applies the estimated map to received features.
pub fn apply(map: &AlignmentMap, features_rx: &FeatureMatrix) -> Result<FeatureMatrix> {
    if features_rx.dim() != map.input_dim() {
        return Err(Error::DimensionMismatch {
            context: "apply alignment",
            expected: map.input_dim(),
            actual: features_rx.dim(),
        });
    }
    Ok(FeatureMatrix::new(match &map.transform {
        AlignmentTransform::Linear(m) => m * features_rx.as_matrix(),
        AlignmentTransform::Network(net) => net.forward(features_rx.as_matrix()),
    }))
}

/// Mean over columns of the squared residual norm.
pub(crate) fn mean_residual(predicted: &DMatrix<f64>, target: &DMatrix<f64>) -> f64 {
    (target - predicted).norm_squared() / target.ncols().max(1) as f64
}

pub(crate) fn check_pair(
    tx: &FeatureMatrix,
    reference: &FeatureMatrix,
    context: &'static str,
) -> Result<()> {
    if tx.len() != reference.len() {
        return Err(Error::DimensionMismatch {
            context,
            expected: tx.len(),
            actual: reference.len(),
        });
    }
    if tx.is_empty() {
        return Err(Error::Validation(format!("{context}: no anchors")));
    }
    if !tx.is_finite() || !reference.is_finite() {
        return Err(Error::Validation(format!(
            "{context}: non-finite anchor features"
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::{transmit, ChannelSpec};
    use crate::features::{make_ground_truth_transform, TransformKind};
    use crate::rng;

    #[test]
    fn identity_map_leaves_features() {
        let f = FeatureMatrix::from_row_major(2, 2, &[1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(apply(&AlignmentMap::identity(2), &f).unwrap(), f);
        assert!(apply(&AlignmentMap::identity(3), &f).is_err());
    }

    #[test]
    fn ground_truth_map_recovers_target_features() {
        let mut r = rng::stream(1, 0);
        let z1 = FeatureMatrix::new(rng::gaussian_matrix(8, 20, 1.0, &mut r));
        let t = make_ground_truth_transform(8, TransformKind::GeneralInvertible, 10.0, 3).unwrap();
        let z2 = &t.matrix * z1.as_matrix();
        let out = apply(
            &AlignmentMap::from_matrix(EstimatorKind::Ls, t.matrix.clone()),
            &z1,
        )
        .unwrap();
        assert_eq!(out.as_matrix(), &z2);
    }

    /// Residual of the true map on noisy inputs is `M eps`, whose covariance
    /// is `sigma^2 M M^T`.
    #[test]
    fn residual_covariance_propagates_noise() {
        let d = 4;
        let n = 100_000;
        let sigma = 0.5;
        let t = make_ground_truth_transform(d, TransformKind::GeneralInvertible, 5.0, 8).unwrap();
        let z1 = FeatureMatrix::zeros(d, n);
        let z1_rx = transmit(&z1, &ChannelSpec::from_sigma(sigma, 5).unwrap(), 0);
        let map = AlignmentMap::from_matrix(EstimatorKind::Ls, t.matrix.clone());
        let residual = apply(&map, &z1_rx).unwrap().into_matrix() - &t.matrix * z1.as_matrix();
        let empirical = &residual * residual.transpose() / n as f64;
        let expected = &t.matrix * t.matrix.transpose() * sigma * sigma;
        let rel = (&empirical - &expected).norm() / expected.norm();
        assert!(rel < 0.05, "relative covariance error {rel}");
    }

    #[test]
    fn json_layout_for_linear_and_network_maps() {
        let m = AlignmentMap {
            estimator: EstimatorKind::Mmse,
            transform: AlignmentTransform::Linear(DMatrix::from_row_slice(
                2,
                2,
                &[1.0, 2.0, 3.0, 4.0],
            )),
            sigma_used: 0.5,
            n_tau_used: 100,
            fit_residual: 0.25,
            loss_trace: vec![],
        };
        let v = serde_json::to_value(&m).unwrap();
        assert_eq!(v["estimator"], "mmse");
        assert_eq!(v["d"], 2);
        assert_eq!(v["matrix"]["data"][1], 2.0);
        assert_eq!(v["n_tau_used"], 100);
        let back: AlignmentMap = serde_json::from_value(v).unwrap();
        assert_eq!(back, m);

        let mut r = rng::stream(0, 0);
        let ft = AlignmentMap {
            estimator: EstimatorKind::FtNonlinear,
            transform: AlignmentTransform::Network(Mlp::random(&[2, 3, 2], &mut r)),
            sigma_used: 0.0,
            n_tau_used: 10,
            fit_residual: 0.1,
            loss_trace: vec![1.0, 0.5],
        };
        let v = serde_json::to_value(&ft).unwrap();
        assert!(v.get("matrix").is_none());
        let back: AlignmentMap = serde_json::from_value(v).unwrap();
        assert_eq!(back, ft);
    }
}
