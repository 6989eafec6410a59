//! Synthetic classification tasks and families of feature spaces related by
//! known ground-truth transforms.
//!
//! Independently trained encoders are only approximately related by a linear
//! map. Here the relation is exact and known, so estimator error can be
//! measured against the truth.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::channel::normalize_power;
use crate::error::{ensure, Error, Result};
use crate::matrix::{condition_number, row_major, FeatureMatrix};
use crate::rng;

/// Default cap on the condition number of general invertible transforms.
pub const DEFAULT_MAX_CONDITION: f64 = 10.0;
/// Anchor count used by server-based alignment.
pub const SERVER_ANCHORS: usize = 100;
/// Anchor count used by on-device alignment.
pub const ON_DEVICE_ANCHORS: usize = 32;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub num_classes: usize,
    pub latent_dim: usize,
    pub samples_per_class: usize,
    /// Radius of the sphere holding the class means, in units of the
    /// within-class standard deviation.
    pub cluster_separation: f64,
    pub seed: u64,
    /// Fraction of each class tagged as test data.
    #[serde(default = "default_test_fraction")]
    pub test_fraction: f64,
}

fn default_test_fraction() -> f64 {
    0.2
}

impl TaskSpec {
    pub fn new(
        num_classes: usize,
        latent_dim: usize,
        samples_per_class: usize,
        cluster_separation: f64,
        seed: u64,
    ) -> Self {
        TaskSpec {
            num_classes,
            latent_dim,
            samples_per_class,
            cluster_separation,
            seed,
            test_fraction: default_test_fraction(),
        }
    }

    /// Every violated invariant, empty when the spec is valid.
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if self.num_classes < 2 {
            v.push(format!(
                "num_classes must be >= 2, got {}",
                self.num_classes
            ));
        }
        if self.latent_dim < 1 {
            v.push("latent_dim must be >= 1".to_string());
        }
        if self.samples_per_class < 1 {
            v.push("samples_per_class must be >= 1".to_string());
        }
        if !(self.cluster_separation > 0.0 && self.cluster_separation.is_finite()) {
            v.push(format!(
                "cluster_separation must be positive, got {}",
                self.cluster_separation
            ));
        }
        if !(0.0..1.0).contains(&self.test_fraction) {
            v.push(format!(
                "test_fraction must lie in [0, 1), got {}",
                self.test_fraction
            ));
        }
        v
    }

    pub fn validate(&self) -> Result<()> {
        let v = self.violations();
        ensure(v.is_empty(), || v.join("; "))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub features: FeatureMatrix,
    pub labels: Vec<usize>,
    pub splits: Vec<Split>,
    pub num_classes: usize,
    pub seed: u64,
}

impl Dataset {
    pub fn new(
        features: FeatureMatrix,
        labels: Vec<usize>,
        splits: Vec<Split>,
        num_classes: usize,
        seed: u64,
    ) -> Result<Self> {
        ensure(labels.len() == features.len(), || {
            format!("{} labels for {} columns", labels.len(), features.len())
        })?;
        ensure(splits.len() == features.len(), || {
            format!("{} split tags for {} columns", splits.len(), features.len())
        })?;
        if let Some(bad) = labels.iter().find(|&&y| y >= num_classes) {
            return Err(Error::Validation(format!(
                "label {bad} out of range for {num_classes} classes"
            )));
        }
        Ok(Dataset {
            features,
            labels,
            splits,
            num_classes,
            seed,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.dim()
    }

    /// Subset with the given columns, in order; split tags carried along.
    pub fn select(&self, indices: &[usize]) -> Dataset {
        Dataset {
            features: self.features.select_columns(indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            splits: indices.iter().map(|&i| self.splits[i]).collect(),
            num_classes: self.num_classes,
            seed: self.seed,
        }
    }

    pub fn indices_of(&self, split: Split) -> Vec<usize> {
        (0..self.len())
            .filter(|&i| self.splits[i] == split)
            .collect()
    }

    pub fn split(&self, split: Split) -> Dataset {
        self.select(&self.indices_of(split))
    }

    /// Training samples are the ones eligible as anchors.
    pub fn anchor_eligible(&self) -> Vec<usize> {
        self.indices_of(Split::Train)
    }
}

/// Draws `C` isotropic Gaussian clusters with unit within-class variance and
/// class means on a sphere of radius `cluster_separation`, then rescales the
/// whole batch to unit mean per-symbol power.
///
/// Columns are ordered class by class; within each class the last
/// `test_fraction` share is tagged [`Split::Test`].
pub fn generate_task(spec: &TaskSpec) -> Result<Dataset> {
    spec.validate()?;
    let (c, d, per) = (spec.num_classes, spec.latent_dim, spec.samples_per_class);
    let mut means_rng = rng::stream(spec.seed, 0);
    let means: Vec<DVector<f64>> = (0..c)
        .map(|_| {
            let mut v = DVector::from_fn(d, |_, _| rng::standard_normal(&mut means_rng));
            while v.norm() == 0.0 {
                v = DVector::from_fn(d, |_, _| rng::standard_normal(&mut means_rng));
            }
            v.normalize() * spec.cluster_separation
        })
        .collect();

    let mut sample_rng = rng::stream(spec.seed, 1);
    let n = c * per;
    let mut raw = DMatrix::zeros(d, n);
    let mut labels = Vec::with_capacity(n);
    let mut splits = Vec::with_capacity(n);
    let n_test = ((per as f64) * spec.test_fraction).round() as usize;
    for (class, mean) in means.iter().enumerate() {
        for k in 0..per {
            let col = class * per + k;
            for i in 0..d {
                raw[(i, col)] = mean[i] + rng::standard_normal(&mut sample_rng);
            }
            labels.push(class);
            splits.push(if k >= per - n_test {
                Split::Test
            } else {
                Split::Train
            });
        }
    }
    let (features, _) = normalize_power(&FeatureMatrix::new(raw))?;
    Dataset::new(features, labels, splits, c, spec.seed)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TransformKind {
    GeneralInvertible,
    Orthogonal,
    OrthogonalScaled,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthTransform {
    #[serde(with = "row_major")]
    pub matrix: DMatrix<f64>,
    pub kind: TransformKind,
    pub condition_number: f64,
}

impl GroundTruthTransform {
    pub fn identity(d: usize) -> Self {
        GroundTruthTransform {
            matrix: DMatrix::identity(d, d),
            kind: TransformKind::Orthogonal,
            condition_number: 1.0,
        }
    }

    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }

    /// Whether the map preserves angles between feature vectors.
    pub fn is_angle_preserving(&self) -> bool {
        matches!(
            self.kind,
            TransformKind::Orthogonal | TransformKind::OrthogonalScaled
        )
    }

    /// Inverse through an LU solve.
    pub fn inverse(&self) -> Result<DMatrix<f64>> {
        let d = self.dim();
        self.matrix
            .clone()
            .lu()
            .solve(&DMatrix::identity(d, d))
            .ok_or(Error::Singular {
                context: "ground-truth inverse",
                condition: self.condition_number,
                advice: "",
            })
    }
}

/// Haar-distributed orthogonal matrix: QR of a Gaussian matrix with the
/// signs of `R`'s diagonal folded into `Q`.
pub fn random_orthogonal(d: usize, rng: &mut rng::Rng) -> DMatrix<f64> {
    let g = rng::gaussian_matrix(d, d, 1.0, rng);
    let qr = g.qr();
    let mut q = qr.q();
    let r = qr.r();
    for j in 0..d {
        if r[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    q
}

pub fn make_ground_truth_transform(
    d: usize,
    kind: TransformKind,
    max_condition: f64,
    seed: u64,
) -> Result<GroundTruthTransform> {
    ensure(d >= 1, || "transform dimension must be >= 1".into())?;
    ensure(max_condition >= 1.0, || {
        format!("max_condition must be >= 1, got {max_condition}")
    })?;
    let mut rng = rng::stream(seed, 0);
    let matrix = match kind {
        TransformKind::Orthogonal => random_orthogonal(d, &mut rng),
        TransformKind::OrthogonalScaled => {
            let q = random_orthogonal(d, &mut rng);
            let (lo, hi) = (0.5f64.ln(), 2.0f64.ln());
            let c = rng.random_range(lo..=hi).exp();
            q * c
        }
        TransformKind::GeneralInvertible => {
            let g = rng::gaussian_matrix(d, d, 1.0 / (d as f64).sqrt(), &mut rng);
            compress_spectrum(g, max_condition)
        }
    };
    let condition_number = condition_number(&matrix);
    Ok(GroundTruthTransform {
        matrix,
        kind,
        condition_number,
    })
}

/// Rescales singular values `s -> s_max (s / s_max)^alpha` so the condition
/// number drops to at most `max_condition`; singular vectors are kept.
fn compress_spectrum(g: DMatrix<f64>, max_condition: f64) -> DMatrix<f64> {
    let svd = g.clone().svd(true, true);
    let s = &svd.singular_values;
    let s_max = s.max();
    let s_min = s.min().max(s_max * 1e-300);
    let ratio = s_max / s_min;
    // Aim slightly below the cap so the re-measured value never exceeds it.
    let target = 1.0 + (max_condition - 1.0) * (1.0 - 1e-9);
    if ratio <= target {
        return g;
    }
    let alpha = target.ln() / ratio.ln();
    let u = svd.u.as_ref().expect("u requested");
    let vt = svd.v_t.as_ref().expect("v_t requested");
    let scaled =
        DVector::from_iterator(s.len(), s.iter().map(|&x| s_max * (x / s_max).powf(alpha)));
    u * DMatrix::from_diagonal(&scaled) * vt
}

/// `M · base`, column by column.
pub fn derive_system_features(
    base: &FeatureMatrix,
    t: &GroundTruthTransform,
) -> Result<FeatureMatrix> {
    if t.matrix.ncols() != base.dim() {
        return Err(Error::DimensionMismatch {
            context: "derive_system_features",
            expected: t.matrix.ncols(),
            actual: base.dim(),
        });
    }
    Ok(FeatureMatrix::new(&t.matrix * base.as_matrix()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum AnchorStrategy {
    UniformRandom,
    #[default]
    ClassStratified,
}

/// Shared, ordered anchor samples and the features each system assigns them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnchorSet {
    #[serde(rename = "anchor_indices")]
    pub indices: Vec<usize>,
    pub samples: FeatureMatrix,
    pub labels: Vec<usize>,
    pub strategy: AnchorStrategy,
    pub seed: u64,
    #[serde(default)]
    pub system_features: BTreeMap<String, FeatureMatrix>,
}

impl AnchorSet {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    /// Records system `id`'s encoding of the anchors; columns must follow
    /// the anchor order.
    pub fn insert_features(
        &mut self,
        id: impl Into<String>,
        features: FeatureMatrix,
    ) -> Result<()> {
        if features.len() != self.len() {
            return Err(Error::DimensionMismatch {
                context: "anchor features",
                expected: self.len(),
                actual: features.len(),
            });
        }
        self.system_features.insert(id.into(), features);
        Ok(())
    }

    pub fn features(&self, id: &str) -> Option<&FeatureMatrix> {
        self.system_features.get(id)
    }
}

/// Picks `n_tau` anchor samples from `dataset`.
///
/// Class-stratified selection shuffles each class and merges them round
/// robin, which equals drawing `ceil(n_tau / C)` per class and truncating;
/// classes that run out are skipped.
pub fn select_anchors(
    dataset: &Dataset,
    n_tau: usize,
    strategy: AnchorStrategy,
    seed: u64,
) -> Result<AnchorSet> {
    ensure(n_tau >= 1, || "n_tau must be >= 1".into())?;
    ensure(n_tau <= dataset.len(), || {
        format!("n_tau = {n_tau} exceeds dataset size {}", dataset.len())
    })?;
    let mut rng = rng::stream(seed, 0);
    let indices = match strategy {
        AnchorStrategy::UniformRandom => {
            let mut all: Vec<usize> = (0..dataset.len()).collect();
            all.shuffle(&mut rng);
            all.truncate(n_tau);
            all
        }
        AnchorStrategy::ClassStratified => {
            let mut per_class: Vec<Vec<usize>> = vec![Vec::new(); dataset.num_classes];
            for (i, &y) in dataset.labels.iter().enumerate() {
                per_class[y].push(i);
            }
            for bucket in per_class.iter_mut() {
                bucket.shuffle(&mut rng);
            }
            let mut out = Vec::with_capacity(n_tau);
            let mut round = 0;
            while out.len() < n_tau {
                for bucket in &per_class {
                    if let Some(&i) = bucket.get(round) {
                        out.push(i);
                        if out.len() == n_tau {
                            break;
                        }
                    }
                }
                round += 1;
            }
            out
        }
    };
    Ok(AnchorSet {
        samples: dataset.features.select_columns(&indices),
        labels: indices.iter().map(|&i| dataset.labels[i]).collect(),
        indices,
        strategy,
        seed,
        system_features: BTreeMap::new(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::relative::cosine_similarity;

    fn nearest_mean_accuracy(ds: &Dataset) -> f64 {
        let d = ds.dim();
        let mut means = vec![DVector::zeros(d); ds.num_classes];
        let mut counts = vec![0usize; ds.num_classes];
        for (j, &y) in ds.labels.iter().enumerate() {
            means[y] += ds.features.column(j);
            counts[y] += 1;
        }
        for (m, &c) in means.iter_mut().zip(&counts) {
            *m /= c as f64;
        }
        let correct = ds
            .labels
            .iter()
            .enumerate()
            .filter(|&(j, &y)| {
                let x = ds.features.column(j);
                let best = (0..ds.num_classes)
                    .min_by(|&a, &b| (&x - &means[a]).norm().total_cmp(&(&x - &means[b]).norm()))
                    .unwrap();
                best == y
            })
            .count();
        correct as f64 / ds.len() as f64
    }

    #[test]
    fn well_separated_task_is_separable() {
        let ds = generate_task(&TaskSpec::new(2, 2, 50, 100.0, 3)).unwrap();
        assert_eq!(ds.len(), 100);
        assert_eq!(nearest_mean_accuracy(&ds), 1.0);
    }

    #[test]
    fn generation_is_deterministic() {
        let spec = TaskSpec::new(4, 8, 20, 3.0, 11);
        assert_eq!(generate_task(&spec).unwrap(), generate_task(&spec).unwrap());
    }

    #[test]
    fn output_has_unit_power() {
        let ds = generate_task(&TaskSpec::new(10, 16, 50, 4.0, 1)).unwrap();
        assert!((ds.features.mean_power() - 1.0).abs() < 1e-12);
        assert_eq!(ds.indices_of(Split::Test).len(), 100);
    }

    #[test]
    fn rejects_invalid_specs() {
        assert!(generate_task(&TaskSpec::new(1, 4, 10, 1.0, 0)).is_err());
        assert!(generate_task(&TaskSpec::new(3, 0, 10, 1.0, 0)).is_err());
        let mut bad = TaskSpec::new(3, 4, 10, 1.0, 0);
        bad.cluster_separation = 0.0;
        assert!(matches!(generate_task(&bad), Err(Error::Validation(_))));
    }

    #[test]
    fn one_dimensional_orthogonal_is_sign() {
        for seed in 0..20 {
            let t = make_ground_truth_transform(1, TransformKind::Orthogonal, 1.0, seed).unwrap();
            assert_eq!(t.matrix[(0, 0)].abs(), 1.0);
        }
    }

    #[test]
    fn orthogonal_preserves_angles() {
        let mut r = rng::stream(5, 9);
        for d in [2, 5, 16] {
            let t =
                make_ground_truth_transform(d, TransformKind::Orthogonal, 1.0, d as u64).unwrap();
            let qtq = t.matrix.transpose() * &t.matrix;
            assert!((qtq - DMatrix::identity(d, d)).abs().max() < 1e-10);
            let u = DVector::from_fn(d, |_, _| rng::standard_normal(&mut r)).normalize();
            let v = DVector::from_fn(d, |_, _| rng::standard_normal(&mut r)).normalize();
            let before = cosine_similarity(u.as_slice(), v.as_slice())
                .unwrap()
                .acos();
            let (mu, mv) = (&t.matrix * &u, &t.matrix * &v);
            let after = cosine_similarity(mu.as_slice(), mv.as_slice())
                .unwrap()
                .acos();
            assert!((before - after).abs() < 1e-9);
        }
    }

    #[test]
    fn orthogonal_scaled_is_scaled_isometry() {
        let t = make_ground_truth_transform(8, TransformKind::OrthogonalScaled, 1.0, 4).unwrap();
        let mtm = t.matrix.transpose() * &t.matrix;
        let c2 = mtm[(0, 0)];
        assert!((0.25..=4.0).contains(&c2));
        assert!((mtm / c2 - DMatrix::identity(8, 8)).abs().max() < 1e-10);
    }

    #[test]
    fn general_invertible_respects_condition_cap() {
        for seed in 0..10 {
            let t = make_ground_truth_transform(16, TransformKind::GeneralInvertible, 10.0, seed)
                .unwrap();
            let measured = condition_number(&t.matrix);
            assert!(measured <= 10.0, "seed {seed}: {measured}");
            assert_eq!(t.condition_number, measured);
        }
    }

    #[test]
    fn derive_features_multiplies_columns() {
        let base = FeatureMatrix::from_row_major(2, 1, &[1.0, 1.0]).unwrap();
        let t = GroundTruthTransform {
            matrix: DMatrix::from_diagonal(&DVector::from_vec(vec![2.0, 3.0])),
            kind: TransformKind::GeneralInvertible,
            condition_number: 1.5,
        };
        let out = derive_system_features(&base, &t).unwrap();
        assert_eq!(out.column(0).as_slice(), &[2.0, 3.0]);
        let id = derive_system_features(&base, &GroundTruthTransform::identity(2)).unwrap();
        assert_eq!(id, base);
        let wrong = FeatureMatrix::zeros(3, 1);
        assert!(matches!(
            derive_system_features(&wrong, &t),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn orthogonal_features_keep_norms() {
        let mut r = rng::stream(1, 1);
        let base = FeatureMatrix::new(rng::gaussian_matrix(16, 50, 1.0, &mut r));
        let t = make_ground_truth_transform(16, TransformKind::Orthogonal, 1.0, 2).unwrap();
        let out = derive_system_features(&base, &t).unwrap();
        for j in 0..50 {
            assert!((out.column(j).norm() - base.column(j).norm()).abs() < 1e-9);
        }
    }

    #[test]
    fn full_uniform_selection_is_a_permutation() {
        let ds = generate_task(&TaskSpec::new(3, 4, 10, 2.0, 0)).unwrap();
        let a = select_anchors(&ds, ds.len(), AnchorStrategy::UniformRandom, 1).unwrap();
        let mut idx = a.indices.clone();
        idx.sort_unstable();
        assert_eq!(idx, (0..ds.len()).collect::<Vec<_>>());
    }

    #[test]
    fn stratified_selection_balances_classes() {
        let ds = generate_task(&TaskSpec::new(10, 16, 50, 4.0, 0)).unwrap();
        let a = select_anchors(&ds, ON_DEVICE_ANCHORS, AnchorStrategy::ClassStratified, 3).unwrap();
        assert_eq!(a.len(), 32);
        let mut counts = [0usize; 10];
        for &y in &a.labels {
            counts[y] += 1;
        }
        assert!(counts.iter().all(|&c| c == 3 || c == 4));
        let mut uniq = a.indices.clone();
        uniq.sort_unstable();
        uniq.dedup();
        assert_eq!(uniq.len(), 32);
        let again =
            select_anchors(&ds, ON_DEVICE_ANCHORS, AnchorStrategy::ClassStratified, 3).unwrap();
        assert_eq!(a, again);
        assert!(select_anchors(&ds, SERVER_ANCHORS, AnchorStrategy::UniformRandom, 3).is_ok());
    }

    #[test]
    fn too_many_anchors_is_an_error() {
        let ds = generate_task(&TaskSpec::new(2, 2, 5, 2.0, 0)).unwrap();
        assert!(select_anchors(&ds, 11, AnchorStrategy::UniformRandom, 0).is_err());
    }

    #[test]
    fn anchor_set_json_field_names() {
        let ds = generate_task(&TaskSpec::new(2, 2, 5, 2.0, 0)).unwrap();
        let a = select_anchors(&ds, 4, AnchorStrategy::ClassStratified, 0).unwrap();
        let v = serde_json::to_value(&a).unwrap();
        assert!(v.get("anchor_indices").is_some());
        assert_eq!(v["seed"], 0);
        let back: AnchorSet = serde_json::from_value(v).unwrap();
        assert_eq!(back, a);
        let dv = serde_json::to_value(&ds).unwrap();
        assert_eq!(dv["features"]["d"], 2);
        assert_eq!(dv["labels"].as_array().unwrap().len(), 10);
    }

    proptest::proptest! {
        #[test]
        fn derived_features_invert(seed in 0u64..500, d in 1usize..9, kind in 0usize..3) {
            let kind = [
                TransformKind::GeneralInvertible,
                TransformKind::Orthogonal,
                TransformKind::OrthogonalScaled,
            ][kind];
            let t = make_ground_truth_transform(d, kind, 10.0, seed).unwrap();
            let z = FeatureMatrix::new(rng::gaussian_matrix(d, 7, 1.0, &mut rng::stream(seed, 1)));
            let back = t.inverse().unwrap() * derive_system_features(&z, &t).unwrap().as_matrix();
            let tol = 1e-12 * t.condition_number * z.as_matrix().amax().max(1.0) * d as f64;
            proptest::prop_assert!((back - z.as_matrix()).amax() <= tol);
        }
    }

}
