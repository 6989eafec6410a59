//! Additive white Gaussian noise link.
//!
//! Power convention: transmitted batches carry unit average power per
//! symbol (mean squared entry equal to one), so `SNR = 1 / sigma^2`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::FeatureMatrix;
use crate::rng;

/// Name of the power convention, echoed into result files.
pub const POWER_CONVENTION: &str = "unit-average-per-symbol";

/// `sigma` such that `sigma^2 = 10^(-snr_db / 10)`.
pub fn snr_to_sigma(snr_db: f64) -> f64 {
    10f64.powf(-snr_db / 20.0)
}

pub fn sigma_to_snr(sigma: f64) -> f64 {
    -20.0 * sigma.log10()
}

/// Which quantity the configuration fixed; the other one is derived.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum NoiseLevel {
    SnrDb(f64),
    Sigma(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ChannelWire", into = "ChannelWire")]
pub struct ChannelSpec {
    pub level: NoiseLevel,
    pub seed: u64,
}

#[derive(Serialize, Deserialize)]
struct ChannelWire {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    snr_db: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    sigma: Option<f64>,
    #[serde(default)]
    seed: u64,
}

impl TryFrom<ChannelWire> for ChannelSpec {
    type Error = Error;

    fn try_from(w: ChannelWire) -> Result<Self> {
        match (w.snr_db, w.sigma) {
            (Some(s), None) => ChannelSpec::from_snr_db(s, w.seed),
            (None, Some(s)) => ChannelSpec::from_sigma(s, w.seed),
            _ => Err(Error::Validation(
                "channel needs exactly one of snr_db or sigma".into(),
            )),
        }
    }
}

impl From<ChannelSpec> for ChannelWire {
    fn from(c: ChannelSpec) -> Self {
        let (snr_db, sigma) = match c.level {
            NoiseLevel::SnrDb(s) => (Some(s), None),
            NoiseLevel::Sigma(s) => (None, Some(s)),
        };
        ChannelWire {
            snr_db,
            sigma,
            seed: c.seed,
        }
    }
}

impl ChannelSpec {
    pub fn from_snr_db(snr_db: f64, seed: u64) -> Result<Self> {
        if !snr_db.is_finite() {
            return Err(Error::Validation(format!(
                "snr_db must be finite, got {snr_db}"
            )));
        }
        Ok(ChannelSpec {
            level: NoiseLevel::SnrDb(snr_db),
            seed,
        })
    }

    pub fn from_sigma(sigma: f64, seed: u64) -> Result<Self> {
        if !(sigma >= 0.0 && sigma.is_finite()) {
            return Err(Error::Validation(format!(
                "sigma must be finite and >= 0, got {sigma}"
            )));
        }
        Ok(ChannelSpec {
            level: NoiseLevel::Sigma(sigma),
            seed,
        })
    }

    /// Noiseless link.
    pub fn noiseless() -> Self {
        ChannelSpec {
            level: NoiseLevel::Sigma(0.0),
            seed: 0,
        }
    }

    pub fn sigma(&self) -> f64 {
        match self.level {
            NoiseLevel::SnrDb(s) => snr_to_sigma(s),
            NoiseLevel::Sigma(s) => s,
        }
    }

    /// `+inf` for a noiseless link.
    pub fn snr_db(&self) -> f64 {
        match self.level {
            NoiseLevel::SnrDb(s) => s,
            NoiseLevel::Sigma(s) => sigma_to_snr(s),
        }
    }

    pub fn with_seed(self, seed: u64) -> Self {
        ChannelSpec { seed, ..self }
    }
}

/// Rescales by one scalar so the mean squared entry is one. Returns the
/// normalized batch and the factor it was divided by.
pub fn normalize_power(features: &FeatureMatrix) -> Result<(FeatureMatrix, f64)> {
    let power = features.mean_power();
    if power == 0.0 {
        return Err(Error::ZeroPower);
    }
    let scale = power.sqrt();
    Ok((FeatureMatrix::new(features.as_matrix() / scale), scale))
}

/// Adds i.i.d. `N(0, sigma^2)` noise to every entry. The realization depends
/// only on the channel seed and `stream`.
pub fn transmit(features: &FeatureMatrix, spec: &ChannelSpec, stream: u64) -> FeatureMatrix {
    let sigma = spec.sigma();
    let mut out = features.clone();
    if sigma == 0.0 {
        return out;
    }
    let mut r = rng::stream(spec.seed, stream);
    // Column-major order: noise for sample j does not depend on later samples.
    for v in out.as_matrix_mut().iter_mut() {
        *v += sigma * rng::standard_normal(&mut r);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DMatrix;

    #[test]
    fn snr_conversion() {
        assert_eq!(snr_to_sigma(0.0), 1.0);
        assert!((snr_to_sigma(20.0) - 0.1).abs() < 1e-15);
        // 10^(-0.6) evaluated independently of the implementation path
        let direct = (-0.6f64 * std::f64::consts::LN_10).exp();
        assert!((snr_to_sigma(6.0).powi(2) - direct).abs() < 1e-15);
        assert!((direct - 0.2512).abs() < 1e-4);
        assert!((sigma_to_snr(snr_to_sigma(7.5)) - 7.5).abs() < 1e-12);
    }

    #[test]
    fn unit_entries_are_already_normalized() {
        let m = FeatureMatrix::from_row_major(2, 2, &[1.0, -1.0, -1.0, 1.0]).unwrap();
        let (out, scale) = normalize_power(&m).unwrap();
        assert_eq!(out, m);
        assert_eq!(scale, 1.0);
    }

    #[test]
    fn normalization_is_scale_invariant() {
        let mut r = rng::stream(3, 0);
        let m = FeatureMatrix::new(rng::gaussian_matrix(16, 1000, 1.0, &mut r));
        let m5 = FeatureMatrix::new(m.as_matrix() * 5.0);
        let (a, sa) = normalize_power(&m).unwrap();
        let (b, sb) = normalize_power(&m5).unwrap();
        assert!((a.as_matrix() - b.as_matrix()).abs().max() < 1e-14);
        assert!((sb / sa - 5.0).abs() < 1e-12);
        assert!((a.mean_power() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn zero_matrix_cannot_be_normalized() {
        assert_eq!(
            normalize_power(&FeatureMatrix::zeros(3, 3)),
            Err(Error::ZeroPower)
        );
    }

    #[test]
    fn noiseless_transmit_is_identity() {
        let m = FeatureMatrix::new(DMatrix::from_fn(4, 5, |i, j| (i * 5 + j) as f64));
        assert_eq!(
            transmit(&m, &ChannelSpec::from_sigma(0.0, 9).unwrap(), 3),
            m
        );
    }

    #[test]
    fn noise_has_requested_variance() {
        let spec = ChannelSpec::from_sigma(0.5, 21).unwrap();
        let x = FeatureMatrix::zeros(1000, 1000);
        let y = transmit(&x, &spec, 0);
        let n = 1e6;
        let mean = y.as_matrix().sum() / n;
        let var = y
            .as_matrix()
            .iter()
            .map(|v| (v - mean).powi(2))
            .sum::<f64>()
            / (n - 1.0);
        assert!((0.2475..=0.2525).contains(&var), "variance {var}");
        assert!(mean.abs() < 4.0 * 0.5 / n.sqrt());
    }

    #[test]
    fn same_seed_same_noise() {
        let spec = ChannelSpec::from_snr_db(6.0, 5).unwrap();
        let x = FeatureMatrix::zeros(8, 8);
        assert_eq!(transmit(&x, &spec, 2), transmit(&x, &spec, 2));
        assert_ne!(transmit(&x, &spec, 2), transmit(&x, &spec, 3));
    }

    #[test]
    fn channel_json_shape() {
        let c: ChannelSpec = serde_json::from_str(r#"{"snr_db": 6.0, "seed": 4}"#).unwrap();
        assert_eq!(c.snr_db(), 6.0);
        assert_eq!(c.seed, 4);
        assert!(serde_json::from_str::<ChannelSpec>(r#"{"snr_db": 6.0, "sigma": 1.0}"#).is_err());
        assert!(serde_json::from_str::<ChannelSpec>(r#"{"sigma": -1.0}"#).is_err());
        let s = serde_json::to_string(&c).unwrap();
        assert_eq!(s, r#"{"snr_db":6.0,"seed":4}"#);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn normalization_is_idempotent(seed in 0u64..1000, scale in 1e-3f64..1e3) {
                let mut r = rng::stream(seed, 0);
                let m = FeatureMatrix::new(rng::gaussian_matrix(6, 7, scale, &mut r));
                let (once, _) = normalize_power(&m).unwrap();
                let (twice, s2) = normalize_power(&once).unwrap();
                prop_assert!((once.as_matrix() - twice.as_matrix()).abs().max() < 1e-12);
                prop_assert!((s2 - 1.0).abs() < 1e-12);
            }
        }
    }
}
