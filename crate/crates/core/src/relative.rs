//! Angle-based relative representations.
//!
//! A feature is described by its cosine similarity to each anchor feature.
//! Any map that preserves angles (orthogonal or scaled orthogonal) leaves
//! these coordinates unchanged, which is what lets independently trained
//! encoders share decoders.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::matrix::FeatureMatrix;

/// Norms at or below this are treated as degenerate.
pub const MIN_NORM: f64 = 1e-12;

/// `a·b / (|a| |b|)`, clamped to `[-1, 1]`.
pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch {
            context: "cosine_similarity",
            expected: a.len(),
            actual: b.len(),
        });
    }
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na <= MIN_NORM {
        return Err(Error::DegenerateFeature {
            what: "left operand",
            index: 0,
        });
    }
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if nb <= MIN_NORM {
        return Err(Error::DegenerateFeature {
            what: "right operand",
            index: 0,
        });
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelativeRepresentation {
    pub values: Vec<f64>,
    pub anchor_fingerprint: String,
}

/// SHA-256 over the shape and little-endian bytes of a matrix, hex encoded.
pub fn fingerprint(m: &FeatureMatrix) -> String {
    let mut h = Sha256::new();
    h.update((m.dim() as u64).to_le_bytes());
    h.update((m.len() as u64).to_le_bytes());
    for v in m.as_matrix().iter() {
        h.update(v.to_le_bytes());
    }
    hex::encode(&h.finalize()[..16])
}

fn anchor_norms(anchors: &FeatureMatrix) -> Result<DVector<f64>> {
    let norms = DVector::from_iterator(
        anchors.len(),
        anchors.as_matrix().column_iter().map(|c| c.norm()),
    );
    if let Some(index) = norms.iter().position(|&n| n <= MIN_NORM) {
        return Err(Error::DegenerateFeature {
            what: "anchor",
            index,
        });
    }
    Ok(norms)
}

pub fn relative_representation(
    z: &[f64],
    anchors: &FeatureMatrix,
) -> Result<RelativeRepresentation> {
    if z.len() != anchors.dim() {
        return Err(Error::DimensionMismatch {
            context: "relative_representation",
            expected: anchors.dim(),
            actual: z.len(),
        });
    }
    anchor_norms(anchors)?;
    let values = anchors
        .as_matrix()
        .column_iter()
        .map(|a| cosine_similarity(z, a.as_slice()))
        .collect::<Result<Vec<_>>>()
        .map_err(|e| match e {
            Error::DegenerateFeature {
                what: "left operand",
                ..
            } => Error::DegenerateFeature {
                what: "feature",
                index: 0,
            },
            other => other,
        })?;
    Ok(RelativeRepresentation {
        values,
        anchor_fingerprint: fingerprint(anchors),
    })
}

/// Column-wise relative representation: output is `n_tau x n`.
pub fn encode_batch_relative(
    features: &FeatureMatrix,
    anchors: &FeatureMatrix,
) -> Result<FeatureMatrix> {
    Ok(FeatureMatrix::new(
        relative_forward(features, anchors)?.output,
    ))
}

/// Intermediate values of a batched relative encoding, kept for the
/// backward pass.
#[derive(Debug, Clone)]
pub(crate) struct RelativeCache {
    pub unit_features: DMatrix<f64>,
    pub feature_norms: DVector<f64>,
    pub unit_anchors: DMatrix<f64>,
    pub anchor_norms: DVector<f64>,
    pub output: DMatrix<f64>,
}

pub(crate) fn relative_forward(
    features: &FeatureMatrix,
    anchors: &FeatureMatrix,
) -> Result<RelativeCache> {
    if features.dim() != anchors.dim() {
        return Err(Error::DimensionMismatch {
            context: "encode_batch_relative",
            expected: anchors.dim(),
            actual: features.dim(),
        });
    }
    let anchor_norms = anchor_norms(anchors)?;
    let feature_norms = DVector::from_iterator(
        features.len(),
        features.as_matrix().column_iter().map(|c| c.norm()),
    );
    if let Some(index) = feature_norms.iter().position(|&n| n <= MIN_NORM) {
        return Err(Error::DegenerateFeature {
            what: "feature",
            index,
        });
    }
    let mut unit_features = features.as_matrix().clone();
    for (mut c, &n) in unit_features.column_iter_mut().zip(feature_norms.iter()) {
        c /= n;
    }
    let mut unit_anchors = anchors.as_matrix().clone();
    for (mut c, &n) in unit_anchors.column_iter_mut().zip(anchor_norms.iter()) {
        c /= n;
    }
    let output = (unit_anchors.transpose() * &unit_features).map(|v| v.clamp(-1.0, 1.0));
    Ok(RelativeCache {
        unit_features,
        feature_norms,
        unit_anchors,
        anchor_norms,
        output,
    })
}

/// Back-propagates `grad_out` (`n_tau x n`) to the raw features and raw
/// anchors. The clamp only trims rounding, so it is treated as identity.
pub(crate) fn relative_backward(
    cache: &RelativeCache,
    grad_out: &DMatrix<f64>,
) -> (DMatrix<f64>, DMatrix<f64>) {
    let grad_unit_features = &cache.unit_anchors * grad_out;
    let grad_unit_anchors = &cache.unit_features * grad_out.transpose();
    (
        unit_backward(
            &cache.unit_features,
            &cache.feature_norms,
            &grad_unit_features,
        ),
        unit_backward(&cache.unit_anchors, &cache.anchor_norms, &grad_unit_anchors),
    )
}

/// Gradient through `u = x / |x|` per column: `(g - u (u·g)) / |x|`.
fn unit_backward(unit: &DMatrix<f64>, norms: &DVector<f64>, grad: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = grad.clone();
    for j in 0..out.ncols() {
        let u = unit.column(j);
        let proj = u.dot(&grad.column(j));
        let mut col = out.column_mut(j);
        col.axpy(-proj, &u, 1.0);
        col /= norms[j];
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::{derive_system_features, make_ground_truth_transform, TransformKind};
    use crate::rng;

    #[test]
    fn cosine_basics() {
        let v = [0.3, -1.2, 2.0];
        let neg: Vec<f64> = v.iter().map(|x| -x).collect();
        assert!((cosine_similarity(&v, &v).unwrap() - 1.0).abs() < 1e-15);
        assert!((cosine_similarity(&v, &neg).unwrap() + 1.0).abs() < 1e-15);
        assert_eq!(cosine_similarity(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        assert!(matches!(
            cosine_similarity(&[0.0, 0.0], &[1.0, 0.0]),
            Err(Error::DegenerateFeature { .. })
        ));
    }

    #[test]
    fn two_axis_anchors() {
        let anchors = FeatureMatrix::from_row_major(2, 2, &[1.0, 0.0, 0.0, 1.0]).unwrap();
        let r = relative_representation(&[1.0, 1.0], &anchors).unwrap();
        let h = 1.0 / 2f64.sqrt();
        assert!((r.values[0] - h).abs() < 1e-15 && (r.values[1] - h).abs() < 1e-15);
        let scaled = relative_representation(&[3.5, 3.5], &anchors).unwrap();
        assert_eq!(r.anchor_fingerprint, scaled.anchor_fingerprint);
        for (a, b) in r.values.iter().zip(&scaled.values) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn degenerate_anchor_reports_index() {
        let anchors = FeatureMatrix::from_row_major(2, 3, &[1.0, 0.0, 2.0, 0.0, 0.0, 1.0]).unwrap();
        assert_eq!(
            relative_representation(&[1.0, 1.0], &anchors),
            Err(Error::DegenerateFeature {
                what: "anchor",
                index: 1
            })
        );
    }

    #[test]
    fn batch_matches_single_and_has_anchor_rows() {
        let mut r = rng::stream(2, 0);
        let z = FeatureMatrix::new(rng::gaussian_matrix(16, 5, 1.0, &mut r));
        let anchors = FeatureMatrix::new(rng::gaussian_matrix(16, 32, 1.0, &mut r));
        let batch = encode_batch_relative(&z, &anchors).unwrap();
        assert_eq!(batch.dim(), 32);
        let single = relative_representation(z.column(0).as_slice(), &anchors).unwrap();
        for (a, b) in batch.column(0).iter().zip(&single.values) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn isometries_leave_representation_unchanged() {
        let mut r = rng::stream(8, 0);
        let z = FeatureMatrix::new(rng::gaussian_matrix(16, 40, 1.0, &mut r));
        let anchors = FeatureMatrix::new(rng::gaussian_matrix(16, 32, 1.0, &mut r));
        for (kind, seed) in [
            (TransformKind::Orthogonal, 1),
            (TransformKind::OrthogonalScaled, 2),
        ] {
            let t = make_ground_truth_transform(16, kind, 1.0, seed).unwrap();
            let a = encode_batch_relative(&z, &anchors).unwrap();
            let b = encode_batch_relative(
                &derive_system_features(&z, &t).unwrap(),
                &derive_system_features(&anchors, &t).unwrap(),
            )
            .unwrap();
            assert!((a.as_matrix() - b.as_matrix()).abs().max() < 1e-9);
        }
    }

    #[test]
    fn fingerprint_tracks_content() {
        let a = FeatureMatrix::from_row_major(1, 2, &[1.0, 2.0]).unwrap();
        let b = FeatureMatrix::from_row_major(1, 2, &[1.0, 2.000001]).unwrap();
        assert_eq!(fingerprint(&a), fingerprint(&a.clone()));
        assert_ne!(fingerprint(&a), fingerprint(&b));
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut r = rng::stream(4, 4);
        let z = rng::gaussian_matrix(4, 3, 1.0, &mut r);
        let a = rng::gaussian_matrix(4, 5, 1.0, &mut r);
        let w = rng::gaussian_matrix(5, 3, 1.0, &mut r);
        let loss = |z: &DMatrix<f64>, a: &DMatrix<f64>| {
            let c = relative_forward(
                &FeatureMatrix::new(z.clone()),
                &FeatureMatrix::new(a.clone()),
            )
            .unwrap();
            c.output.component_mul(&w).sum()
        };
        let cache = relative_forward(
            &FeatureMatrix::new(z.clone()),
            &FeatureMatrix::new(a.clone()),
        )
        .unwrap();
        let (gz, ga) = relative_backward(&cache, &w);
        let h = 1e-6;
        for (target, grad, is_z) in [(&z, &gz, true), (&a, &ga, false)] {
            for k in 0..target.len() {
                let mut p = target.clone();
                let mut m = target.clone();
                p[k] += h;
                m[k] -= h;
                let fd = if is_z {
                    (loss(&p, &a) - loss(&m, &a)) / (2.0 * h)
                } else {
                    (loss(&z, &p) - loss(&z, &m)) / (2.0 * h)
                };
                assert!(
                    (fd - grad[k]).abs() < 1e-7 * (1.0 + fd.abs()),
                    "fd {fd} vs {}",
                    grad[k]
                );
            }
        }
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn values_stay_in_cosine_range(seed in 0u64..500, scale in 1e-6f64..1e6) {
                let mut r = rng::stream(seed, 1);
                let z = FeatureMatrix::new(rng::gaussian_matrix(3, 4, scale, &mut r));
                let mut anchors = rng::gaussian_matrix(3, 6, 1.0, &mut r);
                // exact duplicates of features stress the rounding clamp
                anchors.set_column(0, &z.as_matrix().column(0));
                let out = encode_batch_relative(&z, &FeatureMatrix::new(anchors)).unwrap();
                prop_assert_eq!(out.dim(), 6);
                prop_assert!(out.as_matrix().iter().all(|v| (-1.0..=1.0).contains(v)));
            }
        }
    }
}
