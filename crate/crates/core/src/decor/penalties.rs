//! Baseline decorrelation penalties used by the ablation harness.

use ndarray::{Array2, Array4, Axis};

use super::{DecorError, FeatureMap};

/// DeCov penalty: `½ (‖Σ‖²_F − ‖diag Σ‖²)` where `Σ` is the covariance of the
/// mean-centred flattened channels (spatial positions act as observations).
pub fn decov_penalty(features: &FeatureMap) -> Result<f64, DecorError> {
    let flat = features.flat();
    let n = flat.ncols() as f64;
    let means = flat.mean_axis(Axis(1)).expect("channels have at least one value");
    let centred = &flat - &means.insert_axis(Axis(1));
    let cov = centred.dot(&centred.t()) / n;
    let off_diag: f64 = cov
        .indexed_iter()
        .filter(|((i, j), _)| i != j)
        .map(|(_, v)| v * v)
        .sum();
    let penalty = 0.5 * off_diag;
    if !penalty.is_finite() {
        return Err(DecorError::NonFinite {
            layer_id: features.layer_id(),
            channel: 0,
        });
    }
    Ok(penalty)
}

/// Sum over matrices of `‖W Wᵀ − I‖_F`.
pub fn ortho_penalty(weights: &[Array2<f64>]) -> Result<f64, DecorError> {
    if weights.is_empty() {
        return Err(DecorError::EmptyWeights);
    }
    Ok(weights
        .iter()
        .map(|w| {
            let mut gram = w.dot(&w.t());
            gram.diag_mut().mapv_inplace(|v| v - 1.0);
            gram.iter().map(|v| v * v).sum::<f64>().sqrt()
        })
        .sum())
}

/// Reshapes a `(out, in, kh, kw)` convolution kernel into `(out, in·kh·kw)`.
pub fn conv_kernel_matrix(kernel: &Array4<f64>) -> Array2<f64> {
    let (o, i, kh, kw) = kernel.dim();
    kernel
        .as_standard_layout()
        .into_owned()
        .into_shape_with_order((o, i * kh * kw))
        .expect("element count is preserved")
}
