//! The training objective as differentiable tensor expressions.

use candle_core::{DType, Tensor, D};
use rayon::prelude::*;

use super::config::{DecorGradient, Regularizer, TrainConfig};
use crate::decor::{decor_loss, Reduction};
use crate::model::{tensor_to_feature_map, EncoderTaps, Network};
use crate::Error;

/// Mean binary cross-entropy on logits.
pub fn bce_with_logits(logits: &Tensor, target: &Tensor) -> Result<Tensor, Error> {
    let softplus = logits.abs()?.neg()?.exp()?.affine(1.0, 1.0)?.log()?;
    Ok((logits.relu()? - (logits * target)?)?.add(&softplus)?.mean_all()?)
}

/// Batch mean of the per-sample soft Dice loss.
pub fn soft_dice_loss(logits: &Tensor, target: &Tensor, smooth: f64) -> Result<Tensor, Error> {
    let p = candle_nn::ops::sigmoid(logits)?;
    let rank = logits.rank();
    let dims: Vec<usize> = (1..rank).collect();
    let inter = (&p * target)?.sum(dims.as_slice())?;
    let denom = (p.sum(dims.as_slice())? + target.sum(dims.as_slice())?)?.affine(1.0, smooth)?;
    let dice = inter.affine(2.0, smooth)?.div(&denom)?;
    Ok(dice.neg()?.affine(1.0, 1.0)?.mean_all()?)
}

/// Per-sample decorrelation loss of a `(B, C, H, W)` tap, shape `(B,)`.
pub fn decor_per_sample(tap: &Tensor, layer: usize, epsilon: f64, path: DecorGradient) -> Result<Tensor, Error> {
    match path {
        DecorGradient::ClosedForm => decor_closed_form(tap, layer, epsilon),
        DecorGradient::Autodiff => decor_autodiff(tap, epsilon),
    }
}

/// Value from the f64 kernel; gradient injected through `⟨tap, g⟩ − ⟨tap, g⟩.detach()`.
fn decor_closed_form(tap: &Tensor, layer: usize, epsilon: f64) -> Result<Tensor, Error> {
    let (b, c, h, w) = tap.dims4()?;
    let detached = tap.detach();
    let per_sample: Vec<(f64, Vec<f64>)> = (0..b)
        .into_par_iter()
        .map(|i| {
            let fm = tensor_to_feature_map(&detached.get(i)?, layer)?;
            let r = decor_loss(&fm, epsilon)?;
            Ok((r.loss, r.gradient.iter().copied().collect()))
        })
        .collect::<Result<_, Error>>()?;
    let mut losses = Vec::with_capacity(b);
    let mut grad = Vec::with_capacity(b * c * h * w);
    for (l, g) in per_sample {
        losses.push(l);
        grad.extend(g);
    }
    let device = tap.device();
    let grad = Tensor::from_vec(grad, (b, c, h, w), device)?.to_dtype(tap.dtype())?;
    let inner = (tap * &grad)?.sum((1, 2, 3))?;
    let losses = Tensor::from_vec(losses, b, device)?.to_dtype(tap.dtype())?;
    Ok((&inner - inner.detach())?.add(&losses)?)
}

/// Gram → detached row max → masked scaling → log-softmax → diagonal.
fn decor_autodiff(tap: &Tensor, epsilon: f64) -> Result<Tensor, Error> {
    let (b, c, h, w) = tap.dims4()?;
    let flat = tap.reshape((b, c, h * w))?;
    let gram = flat.matmul(&flat.t()?.contiguous()?)?;
    let z = gram.max_keepdim(D::Minus1)?.detach();
    let live = z.ge(epsilon)?;
    let inv = live.where_cond(&z.recip()?, &z.zeros_like()?)?;
    let scaled = gram.broadcast_mul(&inv)?;
    let log_p = candle_nn::ops::log_softmax(&scaled, D::Minus1)?;
    let eye = Tensor::eye(c, tap.dtype(), tap.device())?;
    Ok(log_p.broadcast_mul(&eye)?.sum((1, 2))?.neg()?)
}

/// Per-sample DeCov penalty of a `(B, C, H, W)` tap, shape `(B,)`.
pub fn decov_per_sample(tap: &Tensor) -> Result<Tensor, Error> {
    let (b, c, h, w) = tap.dims4()?;
    let n = (h * w) as f64;
    let flat = tap.reshape((b, c, h * w))?;
    let centred = flat.broadcast_sub(&flat.mean_keepdim(2)?)?;
    let cov = (centred.matmul(&centred.t()?.contiguous()?)? / n)?;
    let eye = Tensor::eye(c, tap.dtype(), tap.device())?;
    let all = cov.sqr()?.sum((1, 2))?;
    let diag = cov.broadcast_mul(&eye)?.sqr()?.sum((1, 2))?;
    Ok(((all - diag)? * 0.5)?)
}

/// `Σ ‖W Wᵀ − I‖_F` over kernels reshaped to `(out, in·kh·kw)`.
pub fn ortho_term(kernels: &[Tensor]) -> Result<Tensor, Error> {
    let mut terms = Vec::with_capacity(kernels.len());
    for k in kernels {
        let o = k.dims()[0];
        let m = k.flatten_from(1)?;
        let gram = m.matmul(&m.t()?.contiguous()?)?;
        let dev = gram.sub(&Tensor::eye(o, k.dtype(), k.device())?)?;
        terms.push(dev.sqr()?.sum_all()?.sqrt()?);
    }
    if terms.is_empty() {
        return Err(crate::DecorError::EmptyWeights.into());
    }
    Ok(Tensor::stack(&terms, 0)?.sum_all()?)
}

fn reduce(values: &Tensor, r: Reduction) -> Result<Tensor, Error> {
    Ok(match r {
        Reduction::Mean => values.mean_all()?,
        Reduction::Sum => values.sum_all()?,
    })
}

fn scalar(t: &Tensor) -> Result<f64, Error> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

/// Objective value with its components in `f64`.
#[derive(Debug)]
pub struct LossTerms {
    /// Graph node to differentiate.
    pub graph: Tensor,
    /// `w_ce·ce + w_dice·dice + reg`, composed in `f64`.
    pub total: f64,
    pub ce: f64,
    pub dice: f64,
    /// Weighted regulariser term.
    pub reg: f64,
    /// Layer-reduced decorrelation loss without λ (decor method only).
    pub decor: Option<f64>,
    /// Batch-reduced decorrelation loss per encoder unit (decor method only).
    pub decor_layers: Vec<f64>,
}

/// Full training objective for one batch.
///
/// Units whose λ is zero are evaluated on detached taps for logging only, so
/// they add nothing to the graph; with every λ at zero the graph is exactly
/// the segmentation loss.
pub fn training_objective(
    config: &TrainConfig,
    network: &Network,
    logits: &Tensor,
    target: &Tensor,
    taps: &EncoderTaps,
) -> Result<LossTerms, Error> {
    let w = &config.loss;
    let ce_t = bce_with_logits(logits, target)?;
    let dice_t = soft_dice_loss(logits, target, w.dice_smooth)?;
    let mut graph = ((&ce_t * w.weight_ce)? + (&dice_t * w.weight_dice)?)?;
    let (ce, dice) = (scalar(&ce_t)?, scalar(&dice_t)?);
    let mut reg = 0.0;
    let mut decor = None;
    let mut decor_layers = Vec::new();
    let n_layers = taps.taps.len();
    let layer_scale = match w.layer_reduction {
        Reduction::Mean => 1.0 / n_layers as f64,
        Reduction::Sum => 1.0,
    };

    match config.regularizer.method {
        Regularizer::Decor => {
            let mut weighted: Option<Tensor> = None;
            for (l, tap) in taps.taps.iter().enumerate() {
                let lambda = w.lambda_for(l);
                let input = if lambda == 0.0 { tap.detach() } else { tap.clone() };
                let per_sample = decor_per_sample(&input, l, w.epsilon, config.regularizer.decor_gradient)?;
                let layer_loss = reduce(&per_sample, w.batch_reduction)?;
                decor_layers.push(scalar(&layer_loss)?);
                if lambda != 0.0 {
                    let term = (layer_loss * (lambda * layer_scale))?;
                    weighted = Some(match weighted {
                        Some(acc) => (acc + term)?,
                        None => term,
                    });
                }
            }
            decor = Some(w.layer_reduction.apply(&decor_layers));
            let lambdas: Vec<f64> = decor_layers.iter().enumerate().map(|(l, v)| w.lambda_for(l) * v).collect();
            reg = w.layer_reduction.apply(&lambdas);
            if let Some(t) = weighted {
                graph = (graph + t)?;
            }
        }
        Regularizer::Decov if config.regularizer.penalty_weight != 0.0 => {
            let mut layer_values = Vec::with_capacity(n_layers);
            let mut acc: Option<Tensor> = None;
            for tap in &taps.taps {
                let layer = reduce(&decov_per_sample(tap)?, w.batch_reduction)?;
                layer_values.push(scalar(&layer)?);
                acc = Some(match acc {
                    Some(a) => (a + layer)?,
                    None => layer,
                });
            }
            let pw = config.regularizer.penalty_weight;
            reg = pw * w.layer_reduction.apply(&layer_values);
            if let Some(a) = acc {
                graph = (graph + (a * (pw * layer_scale))?)?;
            }
        }
        Regularizer::Ortho if config.regularizer.penalty_weight != 0.0 => {
            let pw = config.regularizer.penalty_weight;
            let term = ortho_term(&network.encoder_conv_weights())?;
            reg = pw * scalar(&term)?;
            graph = (graph + (term * pw)?)?;
        }
        Regularizer::Decov | Regularizer::Ortho | Regularizer::None => {}
    }
    let total = w.weight_ce * ce + w.weight_dice * dice + reg;
    Ok(LossTerms {
        graph,
        total,
        ce,
        dice,
        reg,
        decor,
        decor_layers,
    })
}
