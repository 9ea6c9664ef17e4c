//! Channel-decorrelated residual U-Net for binary CT infection segmentation.
//!
//! - [`decor`]: decorrelation loss with closed-form gradient, the combined
//!   segmentation objective and baseline penalties.
//! - [`model`]: residual U-Net with configurable channel widths and encoder taps.
//! - [`data`]: NIfTI ingestion, windowing, volume-level splits, augmentation.
//! - [`metrics`]: Dice, IoU, precision and recall with per-volume aggregation.
//! - [`train`]: optimisation loop, plateau schedule, checkpoints, evaluation.
//! - [`experiments`]: correlation probe and channel/method sweeps.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod data;
pub mod decor;
pub mod experiments;
pub mod metrics;
pub mod model;
pub mod train;
pub mod util;

pub use decor::{
    CorrelationMap, DecorError, DecorLossResult, FeatureMap, LossWeights, ProbabilityMap,
    Reduction,
};
pub use data::{DataError, SliceSample};
pub use metrics::{ConfusionCounts, MetricSummary, MetricsError, MetricsReport, VolumeMetrics};
pub use train::{TrainConfig, TrainOutcome};
pub use model::{BlockKind, ChannelConfig, EncoderTaps, ModelError, Network, NetworkSpec};

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Decor(#[from] DecorError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Candle(#[from] candle_core::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}
