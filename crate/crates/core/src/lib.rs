//! Alignment of independently trained task-oriented communication systems
//! over AWGN channels.
//!
//! Two approaches are provided:
//!
//! * server-side alignment: a linear map between feature spaces is
//!   estimated from received anchor features (LS, MMSE, gradient descent, or
//!   a small fine-tuned network) and applied before the reference decoder;
//! * on-device alignment: encoders transmit cosine similarities to a shared
//!   anchor set, so decoders from other systems can read them directly.
//!
//! The [`eval`] module holds the metrics, the bound checker and the
//! runtime benchmark.

pub mod channel;
pub mod error;
pub mod estimators;
pub mod eval;
pub mod features;
pub mod matrix;
pub mod models;
pub mod nn;
pub mod relative;
pub mod rng;

pub use channel::{normalize_power, snr_to_sigma, transmit, ChannelSpec};
pub use error::{Error, Result};
pub use estimators::{
    apply, estimate_ft, estimate_gd, estimate_ls, estimate_mmse, AlignmentMap, EstimatorKind,
    GdConfig,
};
pub use features::{
    generate_task, make_ground_truth_transform, select_anchors, AnchorSet, Dataset,
    GroundTruthTransform, TaskSpec,
};
pub use matrix::FeatureMatrix;
pub use models::{
    cross_model_infer, decode, encode, train_baseline, train_on_device_aligned, Mode, TocSystem,
    TrainConfig,
};
pub use relative::{cosine_similarity, encode_batch_relative, relative_representation};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/feature-spaces.md")]
    mod feature_spaces {}
    #[doc = include_str!("../../../book/src/channel.md")]
    mod channel {}
    #[doc = include_str!("../../../book/src/estimators.md")]
    mod estimators {}
    #[doc = include_str!("../../../book/src/relative.md")]
    mod relative {}
    #[doc = include_str!("../../../book/src/systems.md")]
    mod systems {}
    #[doc = include_str!("../../../book/src/evaluation.md")]
    mod evaluation {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
