use nalgebra::DMatrix;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::channel::ChannelSpec;
use crate::error::{Error, Result};
use crate::estimators::{AlignmentMap, EstimatorKind};
use crate::features::{Dataset, GroundTruthTransform};
use crate::matrix::inf_norm;
use crate::models::{received_features, Decoder, Mode, TocSystem};
use crate::nn::log_softmax;
use crate::rng;

/// Infinity-norm Lipschitz constant of `log_softmax`: its Jacobian
/// `I - 1 p^T` has row sums `2 (1 - p_i) <= 2`.
const LOG_SOFTMAX_LIPSCHITZ: f64 = 2.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LipschitzEstimate {
    /// Product of layer induced infinity norms: a certified bound for the
    /// logits map.
    pub analytic_logits: f64,
    /// Certified bound for the log-probability map.
    pub analytic: f64,
    /// Largest ratio seen over random close pairs of the log-probability
    /// map. Diagnostic only.
    pub empirical: f64,
    pub probes: usize,
}

/// Lipschitz constant of a decoder in the infinity norm.
pub fn estimate_lipschitz(
    decoder: &Decoder,
    probe_count: usize,
    domain_radius: f64,
    seed: u64,
) -> LipschitzEstimate {
    let analytic_logits = decoder.net.inf_norm_bound();
    let d = decoder.input_dim();
    let mut r = rng::stream(seed, 0);
    let h = 1e-4 * domain_radius.max(1e-3);
    let mut empirical: f64 = 0.0;
    for _ in 0..probe_count {
        let a = DMatrix::from_fn(d, 1, |_, _| r.random_range(-domain_radius..=domain_radius));
        let delta = DMatrix::from_fn(d, 1, |_, _| r.random_range(-h..=h));
        let step = delta.amax();
        if step == 0.0 {
            continue;
        }
        let fa = log_softmax(&decoder.net.forward(&a));
        let fb = log_softmax(&decoder.net.forward(&(&a + &delta)));
        empirical = empirical.max((fb - fa).amax() / step);
    }
    LipschitzEstimate {
        analytic_logits,
        analytic: LOG_SOFTMAX_LIPSCHITZ * analytic_logits,
        empirical,
        probes: probe_count,
    }
}

/// `sqrt(2 ln d)`, the Gaussian-maximum factor bounding `E max_j |eps_j|`
/// in units of `sigma`.
pub fn gaussian_max_factor(d: usize) -> f64 {
    (2.0 * (d as f64).ln()).sqrt()
}

/// Measured gap between cross-model and matched lower bounds against the
/// Lipschitz bound `rho sigma sqrt(2 ln d) |M - I|_inf`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub encoder_id: String,
    pub decoder_id: String,
    /// `None` for a noiseless channel.
    pub snr_db: Option<f64>,
    pub sigma: f64,
    pub d: usize,
    pub samples: usize,
    pub draws: usize,
    pub channel_seed: u64,
    pub measured_gap: f64,
    pub gap_std_error: f64,
    pub rho: f64,
    pub rho_empirical: f64,
    pub m_minus_i_inf: f64,
    /// Right-hand side including `rho`.
    pub rhs: f64,
    /// Right-hand side as stated without `rho`; logged for comparison.
    pub rhs_rho_free: f64,
    pub slack: f64,
    pub slack_rho_free: f64,
}

impl BoundReport {
    pub fn holds(&self, tolerance: f64) -> bool {
        self.slack >= -tolerance
    }
}

/// Compares `L_OS` (encoder of `system1`, the true map `M`, decoder of
/// `system2`) with the matched `L` of `system2`, using the same noise
/// realizations on both sides.
///
/// `system2` is expected to satisfy `encoder2 = M encoder1`, e.g. built with
/// [`crate::models::transformed_system`].
pub fn check_prop1_bound(
    system1: &TocSystem,
    system2: &TocSystem,
    truth: &GroundTruthTransform,
    channel: &ChannelSpec,
    dataset: &Dataset,
    draws: usize,
) -> Result<BoundReport> {
    if system1.mode != Mode::Plain || system2.mode != Mode::Plain {
        return Err(Error::ModeMismatch(
            "the bound check compares plain systems".into(),
        ));
    }
    let d = system2.decoder.input_dim();
    if system1.encoder.output_dim() != d || truth.dim() != d {
        return Err(Error::DimensionMismatch {
            context: "check_prop1_bound",
            expected: d,
            actual: if truth.dim() != d {
                truth.dim()
            } else {
                system1.encoder.output_dim()
            },
        });
    }
    if draws == 0 || dataset.is_empty() {
        return Err(Error::Validation(
            "check_prop1_bound needs at least one draw and one sample".into(),
        ));
    }
    let map = AlignmentMap::from_matrix(EstimatorKind::Ls, truth.matrix.clone());
    let mut diffs = Vec::with_capacity(dataset.len() * draws);
    for draw in 0..draws as u64 {
        let cross = received_features(
            system1,
            system2,
            Some(&map),
            channel,
            &dataset.features,
            draw,
        )?;
        let matched = received_features(system2, system2, None, channel, &dataset.features, draw)?;
        let lp_cross = system2.decoder.log_probabilities(cross.as_matrix());
        let lp_matched = system2.decoder.log_probabilities(matched.as_matrix());
        diffs.extend(
            dataset
                .labels
                .iter()
                .enumerate()
                .map(|(j, &y)| lp_cross[(y, j)] - lp_matched[(y, j)]),
        );
    }
    let n = diffs.len() as f64;
    let mean = diffs.iter().sum::<f64>() / n;
    let var = if diffs.len() > 1 {
        diffs.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };

    let lipschitz = estimate_lipschitz(&system2.decoder, 256, 3.0, channel.seed);
    let sigma = channel.sigma();
    let m_minus_i_inf = inf_norm(&(&truth.matrix - DMatrix::identity(d, d)));
    let rhs_rho_free = sigma * gaussian_max_factor(d) * m_minus_i_inf;
    let rhs = lipschitz.analytic * rhs_rho_free;
    let measured_gap = mean.abs();
    let report = BoundReport {
        encoder_id: system1.id.clone(),
        decoder_id: system2.id.clone(),
        snr_db: (sigma > 0.0).then(|| channel.snr_db()),
        sigma,
        d,
        samples: dataset.len(),
        draws,
        channel_seed: channel.seed,
        measured_gap,
        gap_std_error: (var / n).sqrt(),
        rho: lipschitz.analytic,
        rho_empirical: lipschitz.empirical,
        m_minus_i_inf,
        rhs,
        rhs_rho_free,
        slack: rhs - measured_gap,
        slack_rho_free: rhs_rho_free - measured_gap,
    };
    if !(report.rhs.is_finite() && report.measured_gap.is_finite()) {
        return Err(Error::Validation(
            "bound report has non-finite entries".into(),
        ));
    }
    Ok(report)
}
