use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{check_pair, mean_residual, AlignmentMap, AlignmentTransform, EstimatorKind};
use crate::error::{Error, Result};
use crate::matrix::FeatureMatrix;
use crate::nn::{Adam, DivergenceWatch, Mlp};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum GdInit {
    Zeros,
    #[default]
    Identity,
    Gaussian,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GdConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    /// `None` runs full-batch descent.
    #[serde(default)]
    pub batch_size: Option<usize>,
    #[serde(default)]
    pub init: GdInit,
    #[serde(default)]
    pub seed: u64,
}

impl Default for GdConfig {
    fn default() -> Self {
        GdConfig {
            learning_rate: 0.05,
            epochs: 500,
            batch_size: None,
            init: GdInit::Identity,
            seed: 0,
        }
    }
}

impl GdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Validation(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if self.epochs == 0 {
            return Err(Error::Validation("epochs must be positive".into()));
        }
        if self.batch_size == Some(0) {
            return Err(Error::Validation("batch_size must be positive".into()));
        }
        Ok(())
    }
}

/// Mean squared residual `(1/n) sum |y - M x|^2` and its gradient
/// `-(2/n) (Y - M X) X^T`.
pub fn linear_residual_gradient(
    m: &DMatrix<f64>,
    x: &DMatrix<f64>,
    y: &DMatrix<f64>,
) -> (f64, DMatrix<f64>) {
    let n = x.ncols() as f64;
    let r = y - m * x;
    (r.norm_squared() / n, -(&r * x.transpose()) * (2.0 / n))
}

fn batches(n: usize, cfg: &GdConfig, epoch: usize) -> Vec<Vec<usize>> {
    match cfg.batch_size {
        None => vec![(0..n).collect()],
        Some(b) => {
            let mut idx: Vec<usize> = (0..n).collect();
            idx.shuffle(&mut rng::stream(cfg.seed, 1 + epoch as u64));
            idx.chunks(b).map(<[usize]>::to_vec).collect()
        }
    }
}

/// Single linear layer trained by gradient descent on the mean squared
/// anchor residual. The loss trace records the loss at the start of each
/// epoch.
pub fn estimate_gd(
    anchors_tx_rx: &FeatureMatrix,
    anchors_ref_rx: &FeatureMatrix,
    cfg: &GdConfig,
) -> Result<AlignmentMap> {
    check_pair(anchors_tx_rx, anchors_ref_rx, "estimate_gd")?;
    cfg.validate()?;
    let x = anchors_tx_rx.as_matrix();
    let y = anchors_ref_rx.as_matrix();
    let (d_in, d_out) = (x.nrows(), y.nrows());
    let mut m = match cfg.init {
        GdInit::Zeros => DMatrix::zeros(d_out, d_in),
        GdInit::Identity => DMatrix::identity(d_out, d_in),
        GdInit::Gaussian => rng::gaussian_matrix(
            d_out,
            d_in,
            1.0 / (d_in as f64).sqrt(),
            &mut rng::stream(cfg.seed, 0),
        ),
    };
    let mut trace = Vec::with_capacity(cfg.epochs);
    let mut watch = DivergenceWatch::new();
    for epoch in 0..cfg.epochs {
        let loss = mean_residual(&(&m * x), y);
        watch.observe(epoch, loss)?;
        trace.push(loss);
        for batch in batches(x.ncols(), cfg, epoch) {
            let (_, grad) = if batch.len() == x.ncols() {
                linear_residual_gradient(&m, x, y)
            } else {
                linear_residual_gradient(&m, &x.select_columns(&batch), &y.select_columns(&batch))
            };
            m -= grad * cfg.learning_rate;
        }
    }
    let fit_residual = mean_residual(&(&m * x), y);
    if !fit_residual.is_finite() {
        return Err(Error::Divergence {
            epoch: cfg.epochs,
            loss: fit_residual,
            reason: "non-finite final loss",
        });
    }
    Ok(AlignmentMap {
        estimator: EstimatorKind::GdLinear,
        transform: AlignmentTransform::Linear(m),
        sigma_used: 0.0,
        n_tau_used: x.ncols(),
        fit_residual,
        loss_trace: trace,
    })
}

/// Fine-tuning baseline: `affine -> tanh -> affine` trained with Adam on the
/// same residual loss.
pub fn estimate_ft(
    anchors_tx_rx: &FeatureMatrix,
    anchors_ref_rx: &FeatureMatrix,
    hidden_width: usize,
    cfg: &GdConfig,
) -> Result<AlignmentMap> {
    check_pair(anchors_tx_rx, anchors_ref_rx, "estimate_ft")?;
    cfg.validate()?;
    if hidden_width == 0 {
        return Err(Error::Validation("hidden_width must be >= 1".into()));
    }
    let x = anchors_tx_rx.as_matrix();
    let y = anchors_ref_rx.as_matrix();
    let mut net = Mlp::random(
        &[x.nrows(), hidden_width, y.nrows()],
        &mut rng::stream(cfg.seed, 0),
    );
    let mut opt = Adam::new(cfg.learning_rate, &[&net]);
    let mut trace = Vec::with_capacity(cfg.epochs);
    let mut watch = DivergenceWatch::new();
    for epoch in 0..cfg.epochs {
        let loss = mean_residual(&net.forward(x), y);
        watch.observe(epoch, loss)?;
        trace.push(loss);
        for batch in batches(x.ncols(), cfg, epoch) {
            let (xb, yb) = if batch.len() == x.ncols() {
                (x.clone(), y.clone())
            } else {
                (x.select_columns(&batch), y.select_columns(&batch))
            };
            let (out, cache) = net.forward_cached(&xb);
            let grad_out = (out - &yb) * (2.0 / xb.ncols() as f64);
            let (grads, _) = net.backward(&cache, &grad_out);
            opt.step(&mut [&mut net], &[&grads]);
        }
    }
    let fit_residual = mean_residual(&net.forward(x), y);
    if !fit_residual.is_finite() {
        return Err(Error::Divergence {
            epoch: cfg.epochs,
            loss: fit_residual,
            reason: "non-finite final loss",
        });
    }
    Ok(AlignmentMap {
        estimator: EstimatorKind::FtNonlinear,
        transform: AlignmentTransform::Network(net),
        sigma_used: 0.0,
        n_tau_used: x.ncols(),
        fit_residual,
        loss_trace: trace,
    })
}
