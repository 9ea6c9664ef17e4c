//! Channel decorrelation loss.
//!
//! The loss looks at one sample's feature map `H` (channels x height x width),
//! builds the channel Gram matrix `C = H Hᵀ` over flattened channels, divides
//! every row by its own maximum `z_i`, applies a row-wise softmax and then
//! penalises the off-diagonal probability mass with `-Σ log x_ii`.
//!
//! The row maxima are treated as constants when differentiating, so the
//! closed-form gradient in [`decor_loss_backward`] is exact for that
//! convention. Everything here works in `f64` on `ndarray` containers and is
//! independent of the network runtime; the trainer injects the gradient
//! through a surrogate term.

mod loss;
mod objective;
mod penalties;

pub use loss::{
    channel_correlation, decor_loss, decor_loss_backward, decor_loss_forward, normalized_softmax,
    CorrelationMap, DecorForward, DecorLossResult, ProbabilityMap,
};
pub use objective::{
    bce_with_logits, combined_loss, decor_loss_multi_layer, soft_dice_loss, CombinedLoss,
    LayerDecor, LossWeights, MultiLayerDecor, Reduction,
};
pub use penalties::{conv_kernel_matrix, decov_penalty, ortho_penalty};

use ndarray::{Array3, ArrayView2};

/// Guard on the row normaliser `z_i`; rows below it are treated as dead channels.
pub const DEFAULT_EPSILON: f64 = 1e-12;

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum DecorError {
    #[error("feature map for layer {layer_id} has an empty dimension: {shape:?}")]
    EmptyFeatureMap { layer_id: usize, shape: [usize; 3] },
    #[error("non-finite value in layer {layer_id}, channel {channel}")]
    NonFinite { layer_id: usize, channel: usize },
    #[error("shape mismatch: expected {expected}, found {found}")]
    ShapeMismatch { expected: String, found: String },
    #[error("no encoder taps supplied")]
    NoTaps,
    #[error("ground truth must be binary, found {value}")]
    NonBinaryTarget { value: f64 },
    #[error("orthogonality penalty needs at least one weight matrix")]
    EmptyWeights,
    #[error("invalid loss weights: {0}")]
    InvalidWeights(String),
}

/// One sample's activations from a single encoder unit.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    data: Array3<f64>,
    layer_id: usize,
}

impl FeatureMap {
    pub fn new(data: Array3<f64>, layer_id: usize) -> Result<Self, DecorError> {
        let (c, h, w) = data.dim();
        if c == 0 || h == 0 || w == 0 {
            return Err(DecorError::EmptyFeatureMap {
                layer_id,
                shape: [c, h, w],
            });
        }
        for (channel, plane) in data.outer_iter().enumerate() {
            if plane.iter().any(|v| !v.is_finite()) {
                return Err(DecorError::NonFinite { layer_id, channel });
            }
        }
        let data = if data.is_standard_layout() {
            data
        } else {
            data.as_standard_layout().into_owned()
        };
        Ok(Self { data, layer_id })
    }

    pub fn from_vec(
        shape: (usize, usize, usize),
        values: Vec<f64>,
        layer_id: usize,
    ) -> Result<Self, DecorError> {
        let found = values.len();
        let data = Array3::from_shape_vec(shape, values).map_err(|_| DecorError::ShapeMismatch {
            expected: format!("{} values for shape {:?}", shape.0 * shape.1 * shape.2, shape),
            found: found.to_string(),
        })?;
        Self::new(data, layer_id)
    }

    pub fn data(&self) -> &Array3<f64> {
        &self.data
    }

    pub fn into_data(self) -> Array3<f64> {
        self.data
    }

    pub fn layer_id(&self) -> usize {
        self.layer_id
    }

    pub fn channels(&self) -> usize {
        self.data.dim().0
    }

    pub fn spatial(&self) -> (usize, usize) {
        let (_, h, w) = self.data.dim();
        (h, w)
    }

    /// Returns `s * H` with the same layer id.
    pub fn scaled(&self, s: f64) -> Result<Self, DecorError> {
        Self::new(&self.data * s, self.layer_id)
    }

    /// Channels flattened to rows of length `H * W`.
    pub(crate) fn flat(&self) -> ArrayView2<'_, f64> {
        let (c, h, w) = self.data.dim();
        self.data
            .view()
            .into_shape_with_order((c, h * w))
            .expect("feature maps are kept in standard layout")
    }
}
