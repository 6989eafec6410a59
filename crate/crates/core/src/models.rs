//! Desk-scale task-oriented communication systems.
//!
//! A system is an on-device encoder and a server-side decoder joined by the
//! AWGN link. Plain systems transmit their `d`-dimensional features; relative
//! systems transmit cosine similarities to the encoded anchor set (`n_tau`
//! values). Both normalize each transmitted batch to unit power first.
//!
//! Encoders are deterministic maps; all stochasticity comes from the channel.

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::channel::{normalize_power, transmit, ChannelSpec};
use crate::error::{ensure, Error, Result};
use crate::estimators::{
    apply, estimate_ft, estimate_gd, estimate_ls, estimate_mmse, AlignmentMap, GdConfig,
};
use crate::features::Dataset;
use crate::matrix::FeatureMatrix;
use crate::nn::{
    argmax_columns, cross_entropy, log_softmax, power_norm_backward, Adam, DivergenceWatch, Mlp,
    MlpGrads,
};
use crate::relative::{fingerprint, relative_backward, relative_forward};
use crate::rng;

pub const DEFAULT_FEATURE_DIM: usize = 16;
pub const DEFAULT_ENCODER_HIDDEN: usize = 64;
pub const DEFAULT_DECODER_HIDDEN: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    #[default]
    Plain,
    Relative,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Encoder {
    pub net: Mlp,
}

impl Encoder {
    pub fn input_dim(&self) -> usize {
        self.net.input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.net.output_dim()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Decoder {
    pub net: Mlp,
}

impl Decoder {
    pub fn input_dim(&self) -> usize {
        self.net.input_dim()
    }

    pub fn num_classes(&self) -> usize {
        self.net.output_dim()
    }

    /// Log-probabilities, `C x n`.
    pub fn log_probabilities(&self, features: &DMatrix<f64>) -> DMatrix<f64> {
        log_softmax(&self.net.forward(features))
    }
}

/// The shared anchor samples a relative-mode system was built around.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnchorRef {
    pub samples: FeatureMatrix,
    /// Fingerprint of the anchor samples; systems can only exchange
    /// relative features when these agree.
    pub fingerprint: String,
}

impl AnchorRef {
    pub fn new(samples: FeatureMatrix) -> Self {
        let fingerprint = fingerprint(&samples);
        AnchorRef {
            samples,
            fingerprint,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct TrainingLog {
    pub epoch_losses: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config: Option<TrainConfig>,
}

/// Layer widths of a system.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Architecture {
    pub input_dim: usize,
    #[serde(default = "default_encoder_hidden")]
    pub encoder_hidden: usize,
    #[serde(default = "default_feature_dim")]
    pub feature_dim: usize,
    #[serde(default = "default_decoder_hidden")]
    pub decoder_hidden: usize,
    pub num_classes: usize,
}

fn default_encoder_hidden() -> usize {
    DEFAULT_ENCODER_HIDDEN
}
fn default_feature_dim() -> usize {
    DEFAULT_FEATURE_DIM
}
fn default_decoder_hidden() -> usize {
    DEFAULT_DECODER_HIDDEN
}

impl Architecture {
    pub fn new(input_dim: usize, num_classes: usize) -> Self {
        Architecture {
            input_dim,
            encoder_hidden: DEFAULT_ENCODER_HIDDEN,
            feature_dim: DEFAULT_FEATURE_DIM,
            decoder_hidden: DEFAULT_DECODER_HIDDEN,
            num_classes,
        }
    }

    pub fn validate(&self) -> Result<()> {
        ensure(
            self.input_dim > 0
                && self.encoder_hidden > 0
                && self.feature_dim > 0
                && self.decoder_hidden > 0,
            || "all layer widths must be positive".into(),
        )?;
        ensure(self.num_classes >= 2, || "num_classes must be >= 2".into())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TocSystem {
    pub id: String,
    pub encoder: Encoder,
    pub decoder: Decoder,
    pub mode: Mode,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub anchor_ref: Option<AnchorRef>,
    #[serde(default)]
    pub training_log: TrainingLog,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Noise realizations drawn per sample and step.
    #[serde(default = "one")]
    pub noise_samples: usize,
    /// `None` trains without inserting the channel at all.
    pub channel: Option<ChannelSpec>,
    pub seed: u64,
}

fn one() -> usize {
    1
}

impl TrainConfig {
    pub fn new(channel: Option<ChannelSpec>, seed: u64) -> Self {
        TrainConfig {
            epochs: 30,
            batch_size: 64,
            learning_rate: 3e-3,
            noise_samples: 1,
            channel,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        ensure(self.epochs > 0, || "epochs must be positive".into())?;
        ensure(self.batch_size > 0, || "batch_size must be positive".into())?;
        ensure(
            self.learning_rate > 0.0 && self.learning_rate.is_finite(),
            || format!("learning_rate must be positive, got {}", self.learning_rate),
        )?;
        ensure(self.noise_samples >= 1, || {
            "noise_samples must be >= 1".into()
        })
    }
}

/// Gradients for both halves of a system.
#[derive(Debug, Clone, PartialEq)]
pub struct SystemGrads {
    pub encoder: MlpGrads,
    pub decoder: MlpGrads,
}

/// Output of [`decode`].
#[derive(Debug, Clone, PartialEq)]
pub struct Decoded {
    pub predictions: Vec<usize>,
    /// `C x n` log-probabilities.
    pub log_probabilities: DMatrix<f64>,
}

/// Anchor features computed once with the current encoder, for repeated
/// relative encoding at evaluation time.
#[derive(Debug, Clone, PartialEq)]
pub struct AnchorFeatureCache {
    pub features: FeatureMatrix,
    encoder_fingerprint: String,
}

fn encoder_fingerprint(enc: &Encoder) -> String {
    let flat = enc.net.flatten();
    fingerprint(&FeatureMatrix::new(DMatrix::from_column_slice(
        flat.len(),
        1,
        &flat,
    )))
}

impl TocSystem {
    /// Plain-mode system with randomly initialized weights.
    pub fn plain(id: impl Into<String>, arch: &Architecture, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut r = rng::stream(seed, 0);
        let encoder = Encoder {
            net: Mlp::random(
                &[arch.input_dim, arch.encoder_hidden, arch.feature_dim],
                &mut r,
            ),
        };
        let decoder = Decoder {
            net: Mlp::random(
                &[arch.feature_dim, arch.decoder_hidden, arch.num_classes],
                &mut r,
            ),
        };
        Ok(TocSystem {
            id: id.into(),
            encoder,
            decoder,
            mode: Mode::Plain,
            anchor_ref: None,
            training_log: TrainingLog::default(),
        })
    }

    /// Relative-mode system whose decoder reads one value per anchor.
    pub fn relative(
        id: impl Into<String>,
        arch: &Architecture,
        anchor_samples: FeatureMatrix,
        seed: u64,
    ) -> Result<Self> {
        arch.validate()?;
        if anchor_samples.dim() != arch.input_dim {
            return Err(Error::DimensionMismatch {
                context: "anchor samples",
                expected: arch.input_dim,
                actual: anchor_samples.dim(),
            });
        }
        ensure(!anchor_samples.is_empty(), || {
            "relative systems need at least one anchor".into()
        })?;
        let n_tau = anchor_samples.len();
        let mut r = rng::stream(seed, 0);
        let encoder = Encoder {
            net: Mlp::random(
                &[arch.input_dim, arch.encoder_hidden, arch.feature_dim],
                &mut r,
            ),
        };
        let decoder = Decoder {
            net: Mlp::random(&[n_tau, arch.decoder_hidden, arch.num_classes], &mut r),
        };
        Ok(TocSystem {
            id: id.into(),
            encoder,
            decoder,
            mode: Mode::Relative,
            anchor_ref: Some(AnchorRef::new(anchor_samples)),
            training_log: TrainingLog::default(),
        })
    }

    /// Dimension of what goes over the channel.
    pub fn transmitted_dim(&self) -> usize {
        match self.mode {
            Mode::Plain => self.encoder.output_dim(),
            Mode::Relative => self
                .anchor_ref
                .as_ref()
                .map(|a| a.samples.len())
                .unwrap_or(0),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self.mode {
            Mode::Plain => {
                if self.decoder.input_dim() != self.encoder.output_dim() {
                    return Err(Error::DimensionMismatch {
                        context: "plain decoder input",
                        expected: self.encoder.output_dim(),
                        actual: self.decoder.input_dim(),
                    });
                }
            }
            Mode::Relative => {
                let anchors = self.anchor_ref.as_ref().ok_or_else(|| {
                    Error::ModeMismatch(format!("relative system {} has no anchors", self.id))
                })?;
                if self.decoder.input_dim() != anchors.samples.len() {
                    return Err(Error::DimensionMismatch {
                        context: "relative decoder input",
                        expected: anchors.samples.len(),
                        actual: self.decoder.input_dim(),
                    });
                }
            }
        }
        Ok(())
    }

    fn anchor_samples(&self) -> Result<&FeatureMatrix> {
        self.anchor_ref.as_ref().map(|a| &a.samples).ok_or_else(|| {
            Error::ModeMismatch(format!("system {} has no anchor reference", self.id))
        })
    }

    pub fn cache_anchor_features(&self) -> Result<AnchorFeatureCache> {
        let samples = self.anchor_samples()?;
        Ok(AnchorFeatureCache {
            features: FeatureMatrix::new(self.encoder.net.forward(samples.as_matrix())),
            encoder_fingerprint: encoder_fingerprint(&self.encoder),
        })
    }

    /// Relative encoding against precomputed anchor features. Fails if the
    /// cache was built with different encoder weights.
    pub fn encode_with_cache(
        &self,
        inputs: &FeatureMatrix,
        cache: &AnchorFeatureCache,
    ) -> Result<FeatureMatrix> {
        if self.mode != Mode::Relative {
            return Err(Error::ModeMismatch(
                "anchor caches apply to relative systems only".into(),
            ));
        }
        if cache.encoder_fingerprint != encoder_fingerprint(&self.encoder) {
            return Err(Error::Validation(
                "anchor cache is stale: encoder weights changed".into(),
            ));
        }
        self.encoder.net.check_input(inputs.as_matrix(), "encode")?;
        let z = FeatureMatrix::new(self.encoder.net.forward(inputs.as_matrix()));
        Ok(FeatureMatrix::new(
            relative_forward(&z, &cache.features)?.output,
        ))
    }

    /// Mean cross-entropy of one batch and the gradients of every
    /// parameter. Noise for the `noise_samples` copies of the batch comes
    /// from `channel` at stream `stream`, so repeated calls see the same
    /// realization.
    pub fn loss_and_gradients(
        &self,
        inputs: &DMatrix<f64>,
        labels: &[usize],
        channel: Option<&ChannelSpec>,
        noise_samples: usize,
        stream: u64,
    ) -> Result<(f64, SystemGrads)> {
        self.encoder.net.check_input(inputs, "loss_and_gradients")?;
        let n = inputs.ncols();
        let (z, enc_cache) = self.encoder.net.forward_cached(inputs);
        let anchors = match self.mode {
            Mode::Plain => None,
            Mode::Relative => {
                let (za, anchor_cache) = self
                    .encoder
                    .net
                    .forward_cached(self.anchor_samples()?.as_matrix());
                let rel =
                    relative_forward(&FeatureMatrix::new(z.clone()), &FeatureMatrix::new(za))?;
                Some((rel, anchor_cache))
            }
        };
        let sent = match &anchors {
            None => z.clone(),
            Some((rel, _)) => rel.output.clone(),
        };
        let (normalized, scale) = normalize_power(&FeatureMatrix::new(sent))?;
        let normalized = normalized.into_matrix();

        let copies = noise_samples.max(1);
        let mut tiled = DMatrix::zeros(normalized.nrows(), n * copies);
        let mut tiled_labels = Vec::with_capacity(n * copies);
        for c in 0..copies {
            tiled.columns_mut(c * n, n).copy_from(&normalized);
            tiled_labels.extend_from_slice(labels);
        }
        let received = match channel {
            Some(ch) => transmit(&FeatureMatrix::new(tiled), ch, stream).into_matrix(),
            None => tiled,
        };

        let (logits, dec_cache) = self.decoder.net.forward_cached(&received);
        let (loss, grad_logits) = cross_entropy(&logits, &tiled_labels);
        let (decoder_grads, grad_received) = self.decoder.net.backward(&dec_cache, &grad_logits);
        let mut grad_normalized = DMatrix::zeros(normalized.nrows(), n);
        for c in 0..copies {
            grad_normalized += grad_received.columns(c * n, n);
        }
        let grad_sent = power_norm_backward(&normalized, scale, &grad_normalized);

        let encoder_grads = match anchors {
            None => self.encoder.net.backward(&enc_cache, &grad_sent).0,
            Some((rel, anchor_cache)) => {
                let (grad_z, grad_za) = relative_backward(&rel, &grad_sent);
                let mut g = self.encoder.net.backward(&enc_cache, &grad_z).0;
                g.add_assign(&self.encoder.net.backward(&anchor_cache, &grad_za).0);
                g
            }
        };
        Ok((
            loss,
            SystemGrads {
                encoder: encoder_grads,
                decoder: decoder_grads,
            },
        ))
    }
}

/// Features a system produces for `inputs`, before power normalization.
/// Relative systems re-encode their anchors with the current weights.
pub fn encode(system: &TocSystem, inputs: &FeatureMatrix) -> Result<FeatureMatrix> {
    system
        .encoder
        .net
        .check_input(inputs.as_matrix(), "encode")?;
    let z = FeatureMatrix::new(system.encoder.net.forward(inputs.as_matrix()));
    match system.mode {
        Mode::Plain => Ok(z),
        Mode::Relative => {
            let za = FeatureMatrix::new(
                system
                    .encoder
                    .net
                    .forward(system.anchor_samples()?.as_matrix()),
            );
            Ok(FeatureMatrix::new(relative_forward(&z, &za)?.output))
        }
    }
}

/// Predictions (argmax, lowest index on ties) and log-probabilities.
pub fn decode(system: &TocSystem, features_rx: &FeatureMatrix) -> Result<Decoded> {
    system
        .decoder
        .net
        .check_input(features_rx.as_matrix(), "decode")?;
    let log_probabilities = system.decoder.log_probabilities(features_rx.as_matrix());
    Ok(Decoded {
        predictions: argmax_columns(&log_probabilities),
        log_probabilities,
    })
}

fn train_loop(mut system: TocSystem, dataset: &Dataset, cfg: &TrainConfig) -> Result<TocSystem> {
    cfg.validate()?;
    system.validate()?;
    ensure(!dataset.is_empty(), || {
        "cannot train on an empty dataset".into()
    })?;
    ensure(dataset.num_classes == system.decoder.num_classes(), || {
        format!(
            "dataset has {} classes, decoder emits {}",
            dataset.num_classes,
            system.decoder.num_classes()
        )
    })?;
    let x = dataset.features.as_matrix();
    let mut opt = Adam::new(
        cfg.learning_rate,
        &[&system.encoder.net, &system.decoder.net],
    );
    let mut watch = DivergenceWatch::new();
    let mut losses = Vec::with_capacity(cfg.epochs);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut step: u64 = 0;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng::stream(cfg.seed, epoch as u64));
        let mut total = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let xb = x.select_columns(chunk);
            let yb: Vec<usize> = chunk.iter().map(|&i| dataset.labels[i]).collect();
            let channel = cfg
                .channel
                .map(|c| c.with_seed(rng::derive_seed(c.seed, cfg.seed)));
            let (loss, grads) =
                system.loss_and_gradients(&xb, &yb, channel.as_ref(), cfg.noise_samples, step)?;
            step += 1;
            opt.step(
                &mut [&mut system.encoder.net, &mut system.decoder.net],
                &[&grads.encoder, &grads.decoder],
            );
            total += loss;
            batches += 1;
        }
        let epoch_loss = total / batches as f64;
        watch.observe(epoch, epoch_loss)?;
        losses.push(epoch_loss);
    }
    system.training_log = TrainingLog {
        epoch_losses: losses,
        config: Some(cfg.clone()),
    };
    Ok(system)
}

/// End-to-end training of a plain system: minimizes the Monte Carlo
/// cross-entropy through encoder, power normalization, channel and decoder.
pub fn train_baseline(
    system: &TocSystem,
    dataset: &Dataset,
    cfg: &TrainConfig,
) -> Result<TocSystem> {
    if system.mode != Mode::Plain {
        return Err(Error::ModeMismatch(
            "train_baseline expects a plain system".into(),
        ));
    }
    train_loop(system.clone(), dataset, cfg)
}

/// End-to-end training of a relative system against a fixed anchor set.
/// Every step re-encodes the anchors with the current encoder and
/// back-propagates through both branches of the cosine.
pub fn train_on_device_aligned(
    system: &TocSystem,
    dataset: &Dataset,
    anchors: &FeatureMatrix,
    cfg: &TrainConfig,
) -> Result<TocSystem> {
    if system.mode != Mode::Relative {
        return Err(Error::ModeMismatch(
            "train_on_device_aligned expects a relative system".into(),
        ));
    }
    let mut system = system.clone();
    if anchors.len() != system.decoder.input_dim() {
        return Err(Error::DimensionMismatch {
            context: "anchor count",
            expected: system.decoder.input_dim(),
            actual: anchors.len(),
        });
    }
    system.anchor_ref = Some(AnchorRef::new(anchors.clone()));
    train_loop(system, dataset, cfg)
}

/// Trains only a decoder on fixed (already normalized) features sent over
/// the channel.
pub fn train_decoder(
    decoder: &Decoder,
    features: &FeatureMatrix,
    labels: &[usize],
    cfg: &TrainConfig,
) -> Result<Decoder> {
    cfg.validate()?;
    decoder
        .net
        .check_input(features.as_matrix(), "train_decoder")?;
    let mut net = decoder.net.clone();
    let mut opt = Adam::new(cfg.learning_rate, &[&net]);
    let mut order: Vec<usize> = (0..labels.len()).collect();
    let mut watch = DivergenceWatch::new();
    let mut step = 0u64;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng::stream(cfg.seed, epoch as u64));
        let mut total = 0.0;
        let mut count = 0;
        for chunk in order.chunks(cfg.batch_size) {
            let xb = FeatureMatrix::new(features.as_matrix().select_columns(chunk));
            let yb: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
            let rx = match &cfg.channel {
                Some(ch) => transmit(&xb, ch, step),
                None => xb,
            };
            step += 1;
            let (out, cache) = net.forward_cached(rx.as_matrix());
            let (loss, g) = cross_entropy(&out, &yb);
            let (grads, _) = net.backward(&cache, &g);
            opt.step(&mut [&mut net], &[&grads]);
            total += loss;
            count += 1;
        }
        watch.observe(epoch, total / count as f64)?;
    }
    Ok(Decoder { net })
}

/// What the decoder of `decoder_system` receives for `inputs` sent by
/// `encoder_system`: encode, normalize, transmit, then align if requested.
pub fn received_features(
    encoder_system: &TocSystem,
    decoder_system: &TocSystem,
    alignment: Option<&AlignmentMap>,
    channel: &ChannelSpec,
    inputs: &FeatureMatrix,
    stream: u64,
) -> Result<FeatureMatrix> {
    check_compatible(encoder_system, decoder_system, alignment)?;
    let features = encode(encoder_system, inputs)?;
    let (normalized, _) = normalize_power(&features)?;
    let rx = transmit(&normalized, channel, stream);
    match alignment {
        Some(map) => apply(map, &rx),
        None => Ok(rx),
    }
}

fn check_compatible(
    enc: &TocSystem,
    dec: &TocSystem,
    alignment: Option<&AlignmentMap>,
) -> Result<()> {
    if enc.mode != dec.mode {
        return Err(Error::ModeMismatch(format!(
            "encoder {} is {:?} but decoder {} is {:?}",
            enc.id, enc.mode, dec.id, dec.mode
        )));
    }
    match enc.mode {
        Mode::Relative => {
            if alignment.is_some() {
                return Err(Error::ModeMismatch(
                    "relative systems exchange features without server-side alignment".into(),
                ));
            }
            let (a, b) = (enc.anchor_ref.as_ref(), dec.anchor_ref.as_ref());
            match (a, b) {
                (Some(a), Some(b)) if a.fingerprint == b.fingerprint => Ok(()),
                _ => Err(Error::AnchorMismatch {
                    encoder: a.map(|x| x.fingerprint.clone()).unwrap_or_default(),
                    decoder: b.map(|x| x.fingerprint.clone()).unwrap_or_default(),
                }),
            }
        }
        Mode::Plain => {
            let sent = alignment
                .map(AlignmentMap::output_dim)
                .unwrap_or(enc.encoder.output_dim());
            if let Some(map) = alignment {
                if map.input_dim() != enc.encoder.output_dim() {
                    return Err(Error::DimensionMismatch {
                        context: "alignment input",
                        expected: enc.encoder.output_dim(),
                        actual: map.input_dim(),
                    });
                }
            }
            if sent != dec.decoder.input_dim() {
                return Err(Error::DimensionMismatch {
                    context: "decoder input (missing alignment?)",
                    expected: dec.decoder.input_dim(),
                    actual: sent,
                });
            }
            Ok(())
        }
    }
}

/// A plain system whose features are `M z` for the features `z` of
/// `system` and whose decoder undoes `M` before the original decoder.
/// This is the linear-invariance premise made exact; with orthogonal `M`
/// power normalization commutes with the transform as well.
pub fn transformed_system(
    system: &TocSystem,
    m: &DMatrix<f64>,
    id: impl Into<String>,
) -> Result<TocSystem> {
    if system.mode != Mode::Plain {
        return Err(Error::ModeMismatch(
            "transformed_system expects a plain system".into(),
        ));
    }
    let d = system.encoder.output_dim();
    if m.nrows() != d || m.ncols() != d {
        return Err(Error::DimensionMismatch {
            context: "transformed_system",
            expected: d,
            actual: m.nrows(),
        });
    }
    let m_inv = m.clone().try_inverse().ok_or(Error::Singular {
        context: "transformed_system",
        condition: f64::INFINITY,
        advice: "; the ground-truth transform must be invertible",
    })?;
    let mut out = system.clone();
    out.id = id.into();
    out.training_log = TrainingLog::default();
    let last = out
        .encoder
        .net
        .layers
        .last_mut()
        .expect("encoder has layers");
    last.weight = m * &last.weight;
    last.bias = (m * nalgebra::DVector::from_column_slice(&last.bias))
        .iter()
        .copied()
        .collect();
    let first = out
        .decoder
        .net
        .layers
        .first_mut()
        .expect("decoder has layers");
    first.weight = &first.weight * m_inv;
    Ok(out)
}

/// Encoder of one system, decoder of another, no training involved.
pub fn cross_model_infer(
    encoder_system: &TocSystem,
    decoder_system: &TocSystem,
    alignment: Option<&AlignmentMap>,
    channel: &ChannelSpec,
    inputs: &FeatureMatrix,
    stream: u64,
) -> Result<Vec<usize>> {
    let rx = received_features(
        encoder_system,
        decoder_system,
        alignment,
        channel,
        inputs,
        stream,
    )?;
    Ok(decode(decoder_system, &rx)?.predictions)
}

/// How the server estimates the alignment map.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum EstimatorSpec {
    Ls,
    Mmse,
    Gd {
        config: GdConfig,
    },
    Ft {
        hidden_width: usize,
        config: GdConfig,
    },
}

/// Server-side alignment phase: both systems encode the shared anchor
/// samples, each transmits over the channel, and the server fits a map from
/// the transmitter's received anchors to the reference system's received
/// anchors.
pub fn align_server_side(
    tx_system: &TocSystem,
    ref_system: &TocSystem,
    anchor_samples: &FeatureMatrix,
    channel: &ChannelSpec,
    estimator: &EstimatorSpec,
    stream: u64,
) -> Result<AlignmentMap> {
    if tx_system.mode != Mode::Plain || ref_system.mode != Mode::Plain {
        return Err(Error::ModeMismatch(
            "server-side alignment applies to plain systems".into(),
        ));
    }
    let send = |sys: &TocSystem, s: u64| -> Result<FeatureMatrix> {
        let (norm, _) = normalize_power(&encode(sys, anchor_samples)?)?;
        Ok(transmit(&norm, channel, s))
    };
    // Distinct streams: the two anchor transmissions see independent noise.
    let z1 = send(tx_system, rng::derive_seed(stream, 1))?;
    let z2 = send(ref_system, rng::derive_seed(stream, 2))?;
    match estimator {
        EstimatorSpec::Ls => estimate_ls(&z1, &z2),
        EstimatorSpec::Mmse => estimate_mmse(&z1, &z2, channel.sigma(), z1.len()),
        EstimatorSpec::Gd { config } => estimate_gd(&z1, &z2, config),
        EstimatorSpec::Ft {
            hidden_width,
            config,
        } => estimate_ft(&z1, &z2, *hidden_width, config),
    }
}

/// Monte Carlo estimate of the expected log-likelihood of the true labels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LowerBoundEstimate {
    pub mean: f64,
    pub std_error: f64,
    pub samples: usize,
}

impl LowerBoundEstimate {
    pub fn from_values(values: &[f64]) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = if values.len() > 1 {
            values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)
        } else {
            0.0
        };
        LowerBoundEstimate {
            mean,
            std_error: (var / n).sqrt(),
            samples: values.len(),
        }
    }
}

/// Average of `log p(y | received)` over the dataset and `num_noise_draws`
/// channel realizations.
pub fn lower_bound_estimate(
    encoder_system: &TocSystem,
    decoder_system: &TocSystem,
    alignment: Option<&AlignmentMap>,
    dataset: &Dataset,
    channel: &ChannelSpec,
    num_noise_draws: usize,
) -> Result<LowerBoundEstimate> {
    ensure(num_noise_draws >= 1, || {
        "num_noise_draws must be >= 1".into()
    })?;
    let mut values = Vec::with_capacity(dataset.len() * num_noise_draws);
    for draw in 0..num_noise_draws {
        let rx = received_features(
            encoder_system,
            decoder_system,
            alignment,
            channel,
            &dataset.features,
            draw as u64,
        )?;
        let lp = decoder_system.decoder.log_probabilities(rx.as_matrix());
        values.extend(dataset.labels.iter().enumerate().map(|(j, &y)| lp[(y, j)]));
    }
    Ok(LowerBoundEstimate::from_values(&values))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::{generate_task, select_anchors, AnchorStrategy, Split, TaskSpec};

    fn small_task() -> Dataset {
        generate_task(&TaskSpec::new(3, 4, 40, 4.0, 1)).unwrap()
    }

    fn small_arch() -> Architecture {
        Architecture {
            input_dim: 4,
            encoder_hidden: 8,
            feature_dim: 3,
            decoder_hidden: 6,
            num_classes: 3,
        }
    }

    fn accuracy(pred: &[usize], labels: &[usize]) -> f64 {
        pred.iter().zip(labels).filter(|(a, b)| a == b).count() as f64 / labels.len() as f64
    }

    #[test]
    fn zero_encoder_is_degenerate() {
        let mut s = TocSystem::plain("z", &small_arch(), 0).unwrap();
        s.encoder.net = Mlp::zeros(&[4, 8, 3]);
        let ds = small_task();
        let f = encode(&s, &ds.features).unwrap();
        assert!(f.is_degenerate());
        assert_eq!(normalize_power(&f), Err(Error::ZeroPower));
    }

    #[test]
    fn relative_encoding_has_anchor_rows_and_is_deterministic() {
        let ds = small_task();
        let anchors = select_anchors(&ds, 7, AnchorStrategy::ClassStratified, 0).unwrap();
        let s = TocSystem::relative("r", &small_arch(), anchors.samples.clone(), 2).unwrap();
        let a = encode(&s, &ds.features).unwrap();
        assert_eq!(a.dim(), 7);
        assert_eq!(a, encode(&s, &ds.features).unwrap());
        let cache = s.cache_anchor_features().unwrap();
        assert_eq!(s.encode_with_cache(&ds.features, &cache).unwrap(), a);
    }

    #[test]
    fn relative_systems_with_isometric_features_are_interchangeable() {
        use crate::features::{make_ground_truth_transform, TransformKind};
        let ds = small_task();
        let anchors = select_anchors(&ds, 9, AnchorStrategy::ClassStratified, 0).unwrap();
        let s1 = TocSystem::relative("r1", &small_arch(), anchors.samples.clone(), 4).unwrap();
        let q = make_ground_truth_transform(3, TransformKind::OrthogonalScaled, 1.0, 5).unwrap();
        let mut s2 = TocSystem::relative("r2", &small_arch(), anchors.samples, 6).unwrap();
        s2.encoder = s1.encoder.clone();
        let last = s2.encoder.net.layers.last_mut().unwrap();
        last.weight = &q.matrix * &last.weight;
        last.bias = (&q.matrix * nalgebra::DVector::from_column_slice(&last.bias)).as_slice().to_vec();

        let (r1, r2) = (encode(&s1, &ds.features).unwrap(), encode(&s2, &ds.features).unwrap());
        assert!((r1.as_matrix() - r2.as_matrix()).amax() < 1e-9);

        let ch = ChannelSpec::noiseless();
        for dec in [&s1, &s2] {
            let own = cross_model_infer(dec, dec, None, &ch, &ds.features, 0).unwrap();
            for enc in [&s1, &s2] {
                assert_eq!(cross_model_infer(enc, dec, None, &ch, &ds.features, 0).unwrap(), own);
            }
        }
    }

    #[test]
    fn decode_normalizes_and_breaks_ties_low() {
        let mut s = TocSystem::plain("d", &small_arch(), 3).unwrap();
        let f = FeatureMatrix::new(rng::gaussian_matrix(3, 10, 1.0, &mut rng::stream(0, 0)));
        let out = decode(&s, &f).unwrap();
        for c in out.log_probabilities.column_iter() {
            assert!((c.iter().map(|v| v.exp()).sum::<f64>() - 1.0).abs() < 1e-9);
        }
        s.decoder.net = Mlp::zeros(&[3, 6, 3]);
        assert!(decode(&s, &f).unwrap().predictions.iter().all(|&p| p == 0));
        assert!(matches!(
            decode(&s, &FeatureMatrix::zeros(4, 1)),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn training_learns_the_task() {
        let ds = small_task();
        let train = ds.split(Split::Train);
        let test = ds.split(Split::Test);
        let s = TocSystem::plain("t", &small_arch(), 5).unwrap();
        let ch = ChannelSpec::from_snr_db(18.0, 1).unwrap();
        let mut cfg = TrainConfig::new(Some(ch), 9);
        cfg.epochs = 60;
        cfg.batch_size = 16;
        cfg.learning_rate = 1e-2;
        let trained = train_baseline(&s, &train, &cfg).unwrap();
        let pred = cross_model_infer(&trained, &trained, None, &ch, &test.features, 0).unwrap();
        assert!(accuracy(&pred, &test.labels) > 0.9);
        assert_eq!(trained.training_log.epoch_losses.len(), 60);
    }

    #[test]
    fn zero_sigma_matches_no_channel() {
        let ds = small_task();
        let s = TocSystem::plain("t", &small_arch(), 5).unwrap();
        let mut with = TrainConfig::new(Some(ChannelSpec::from_sigma(0.0, 3).unwrap()), 2);
        with.epochs = 3;
        let mut without = with.clone();
        without.channel = None;
        let a = train_baseline(&s, &ds, &with).unwrap();
        let b = train_baseline(&s, &ds, &without).unwrap();
        assert_eq!(a.encoder, b.encoder);
        assert_eq!(a.decoder, b.decoder);
    }

    #[test]
    fn training_is_seed_deterministic() {
        let ds = small_task();
        let s = TocSystem::plain("t", &small_arch(), 5).unwrap();
        let mut cfg = TrainConfig::new(Some(ChannelSpec::from_snr_db(6.0, 3).unwrap()), 2);
        cfg.epochs = 3;
        cfg.noise_samples = 2;
        assert_eq!(
            train_baseline(&s, &ds, &cfg).unwrap(),
            train_baseline(&s, &ds, &cfg).unwrap()
        );
    }

    #[test]
    fn mode_rules_are_enforced() {
        let ds = small_task();
        let anchors = select_anchors(&ds, 5, AnchorStrategy::UniformRandom, 0).unwrap();
        let p = TocSystem::plain("p", &small_arch(), 1).unwrap();
        let r = TocSystem::relative("r", &small_arch(), anchors.samples.clone(), 2).unwrap();
        let ch = ChannelSpec::noiseless();
        assert!(matches!(
            cross_model_infer(&p, &r, None, &ch, &ds.features, 0),
            Err(Error::ModeMismatch(_))
        ));
        assert!(matches!(
            cross_model_infer(
                &r,
                &r,
                Some(&AlignmentMap::identity(5)),
                &ch,
                &ds.features,
                0
            ),
            Err(Error::ModeMismatch(_))
        ));
        let other = select_anchors(&ds, 5, AnchorStrategy::UniformRandom, 1).unwrap();
        let r2 = TocSystem::relative("r2", &small_arch(), other.samples, 3).unwrap();
        assert!(matches!(
            cross_model_infer(&r, &r2, None, &ch, &ds.features, 0),
            Err(Error::AnchorMismatch { .. })
        ));
        let mut wide = small_arch();
        wide.feature_dim = 5;
        let q = TocSystem::plain("q", &wide, 1).unwrap();
        assert!(matches!(
            cross_model_infer(&p, &q, None, &ch, &ds.features, 0),
            Err(Error::DimensionMismatch { .. })
        ));
        assert!(matches!(
            train_baseline(&r, &ds, &TrainConfig::new(None, 0)),
            Err(Error::ModeMismatch(_))
        ));
    }

    #[test]
    fn identity_alignment_on_self_matches_matched_system() {
        let ds = small_task();
        let s = TocSystem::plain("s", &small_arch(), 4).unwrap();
        let ch = ChannelSpec::noiseless();
        let a = cross_model_infer(
            &s,
            &s,
            Some(&AlignmentMap::identity(3)),
            &ch,
            &ds.features,
            0,
        )
        .unwrap();
        let b = cross_model_infer(&s, &s, None, &ch, &ds.features, 0).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn lower_bound_standard_error_scales_with_draws() {
        let ds = small_task();
        let s = TocSystem::plain("s", &small_arch(), 4).unwrap();
        let ch = ChannelSpec::from_snr_db(0.0, 8).unwrap();
        let few = lower_bound_estimate(&s, &s, None, &ds, &ch, 4).unwrap();
        let many = lower_bound_estimate(&s, &s, None, &ds, &ch, 40).unwrap();
        assert!(few.mean < 0.0 && many.mean < 0.0);
        let ratio = few.std_error / many.std_error;
        assert!((ratio / 10f64.sqrt() - 1.0).abs() < 0.25, "ratio {ratio}");
    }

    #[test]
    fn confident_decoder_lower_bound_approaches_zero() {
        let ds = generate_task(&TaskSpec::new(2, 2, 50, 100.0, 3)).unwrap();
        let arch = Architecture {
            input_dim: 2,
            encoder_hidden: 8,
            feature_dim: 2,
            decoder_hidden: 8,
            num_classes: 2,
        };
        let s = TocSystem::plain("s", &arch, 1).unwrap();
        let mut cfg = TrainConfig::new(None, 0);
        cfg.epochs = 200;
        cfg.learning_rate = 0.02;
        cfg.batch_size = 20;
        let t = train_baseline(&s, &ds, &cfg).unwrap();
        let lb = lower_bound_estimate(&t, &t, None, &ds, &ChannelSpec::noiseless(), 1).unwrap();
        assert!(lb.mean < 0.0 && lb.mean > -1e-2, "{}", lb.mean);
    }
}
