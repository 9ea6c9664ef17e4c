use ndarray::{ArrayView3, Axis, Zip};
use serde::{Deserialize, Serialize};

use super::loss::{decor_loss_forward, mean_probability_map};
use super::{DecorError, FeatureMap, ProbabilityMap, DEFAULT_EPSILON};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Reduction {
    #[default]
    Mean,
    Sum,
}

impl Reduction {
    pub fn apply(self, values: &[f64]) -> f64 {
        let total: f64 = values.iter().sum();
        match self {
            Reduction::Sum => total,
            Reduction::Mean if values.is_empty() => 0.0,
            Reduction::Mean => total / values.len() as f64,
        }
    }
}

/// Weights of the training objective `w_ce·CE + w_dice·Dice + λ·decor`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub lambda_decor: f64,
    pub weight_ce: f64,
    pub weight_dice: f64,
    pub layer_reduction: Reduction,
    pub batch_reduction: Reduction,
    /// Optional per-encoder-unit λ replacing `lambda_decor` for that unit.
    pub layer_lambdas: Option<Vec<f64>>,
    pub epsilon: f64,
    pub dice_smooth: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_decor: 0.01,
            weight_ce: 0.5,
            weight_dice: 0.5,
            layer_reduction: Reduction::Mean,
            batch_reduction: Reduction::Mean,
            layer_lambdas: None,
            epsilon: DEFAULT_EPSILON,
            dice_smooth: 1e-5,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<(), DecorError> {
        let bad = |what: &str, v: f64| DecorError::InvalidWeights(format!("{what} = {v}"));
        if !(self.lambda_decor >= 0.0 && self.lambda_decor.is_finite()) {
            return Err(bad("lambda_decor", self.lambda_decor));
        }
        if let Some(ls) = &self.layer_lambdas {
            if let Some(&v) = ls.iter().find(|v| !(**v >= 0.0 && v.is_finite())) {
                return Err(bad("layer_lambdas entry", v));
            }
        }
        if !(self.epsilon > 0.0) {
            return Err(bad("epsilon", self.epsilon));
        }
        if !(self.dice_smooth >= 0.0) {
            return Err(bad("dice_smooth", self.dice_smooth));
        }
        Ok(())
    }

    /// λ applied to encoder unit `layer`.
    pub fn lambda_for(&self, layer: usize) -> f64 {
        self.layer_lambdas
            .as_ref()
            .and_then(|ls| ls.get(layer).copied())
            .unwrap_or(self.lambda_decor)
    }

    /// True when no encoder unit carries any decorrelation weight.
    pub fn decor_disabled(&self, layers: usize) -> bool {
        (0..layers).all(|l| self.lambda_for(l) == 0.0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerDecor {
    pub layer_id: usize,
    /// Batch-reduced loss of this unit.
    pub loss: f64,
    pub mean_probability_map: ProbabilityMap,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MultiLayerDecor {
    /// Layer-reduced loss without λ.
    pub total: f64,
    /// Layer-reduced `λ_l · loss_l`, the term that enters the objective.
    pub weighted: f64,
    pub layers: Vec<LayerDecor>,
}

/// Decorrelation loss over every encoder unit of a batch.
///
/// `taps[b][l]` is sample `b`'s feature map from unit `l`.
pub fn decor_loss_multi_layer(
    taps: &[Vec<FeatureMap>],
    weights: &LossWeights,
) -> Result<MultiLayerDecor, DecorError> {
    let first = taps.first().ok_or(DecorError::NoTaps)?;
    if first.is_empty() {
        return Err(DecorError::NoTaps);
    }
    let layers = first.len();
    for sample in taps {
        let same = sample.len() == layers
            && sample
                .iter()
                .zip(first)
                .all(|(a, b)| a.data().dim() == b.data().dim());
        if !same {
            return Err(DecorError::ShapeMismatch {
                expected: format!("{layers} taps shaped like the first sample"),
                found: format!("{} taps", sample.len()),
            });
        }
    }

    let mut per_layer = Vec::with_capacity(layers);
    for l in 0..layers {
        let mut losses = Vec::with_capacity(taps.len());
        let mut maps = Vec::with_capacity(taps.len());
        for sample in taps {
            let fwd = decor_loss_forward(&sample[l], weights.epsilon)?;
            losses.push(fwd.loss);
            maps.push(fwd.probability_map);
        }
        per_layer.push(LayerDecor {
            layer_id: first[l].layer_id(),
            loss: weights.batch_reduction.apply(&losses),
            mean_probability_map: mean_probability_map(&maps).expect("batch is non-empty"),
        });
    }
    let raw: Vec<f64> = per_layer.iter().map(|l| l.loss).collect();
    let weighted: Vec<f64> = raw
        .iter()
        .enumerate()
        .map(|(l, v)| weights.lambda_for(l) * v)
        .collect();
    Ok(MultiLayerDecor {
        total: weights.layer_reduction.apply(&raw),
        weighted: weights.layer_reduction.apply(&weighted),
        layers: per_layer,
    })
}

/// Numerically stable binary cross-entropy on logits, averaged over pixels.
pub fn bce_with_logits(logits: ArrayView3<'_, f64>, target: ArrayView3<'_, f64>) -> f64 {
    let n = logits.len() as f64;
    let mut total = 0.0;
    Zip::from(&logits).and(&target).for_each(|&x, &y| {
        total += x.max(0.0) - x * y + (-x.abs()).exp().ln_1p();
    });
    total / n
}

/// `1 - (2 Σ p g + s) / (Σ p + Σ g + s)` per sample, averaged over the batch.
pub fn soft_dice_loss(logits: ArrayView3<'_, f64>, target: ArrayView3<'_, f64>, smooth: f64) -> f64 {
    let mut losses = Vec::with_capacity(logits.len_of(Axis(0)));
    for (x, g) in logits.outer_iter().zip(target.outer_iter()) {
        let (mut inter, mut sum_p, mut sum_g) = (0.0, 0.0, 0.0);
        Zip::from(&x).and(&g).for_each(|&x, &g| {
            let p = sigmoid(x);
            inter += p * g;
            sum_p += p;
            sum_g += g;
        });
        losses.push(1.0 - (2.0 * inter + smooth) / (sum_p + sum_g + smooth));
    }
    Reduction::Mean.apply(&losses)
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CombinedLoss {
    pub total: f64,
    pub ce: f64,
    pub dice: f64,
    /// `None` when every λ is zero and no taps were supplied.
    pub decor: Option<MultiLayerDecor>,
}

/// `w_ce·BCE + w_dice·SoftDice + λ·decor` for a batch of single-channel
/// predictions shaped `(batch, height, width)`.
///
/// Taps may be empty only when every λ is zero.
pub fn combined_loss(
    logits: ArrayView3<'_, f64>,
    gt: ArrayView3<'_, f64>,
    taps: &[Vec<FeatureMap>],
    weights: &LossWeights,
) -> Result<CombinedLoss, DecorError> {
    weights.validate()?;
    if logits.dim() != gt.dim() {
        return Err(DecorError::ShapeMismatch {
            expected: format!("{:?}", logits.dim()),
            found: format!("{:?}", gt.dim()),
        });
    }
    if let Some(&value) = gt.iter().find(|v| **v != 0.0 && **v != 1.0) {
        return Err(DecorError::NonBinaryTarget { value });
    }
    let ce = bce_with_logits(logits, gt);
    let dice = soft_dice_loss(logits, gt, weights.dice_smooth);
    let decor = match taps.first() {
        None if weights.decor_disabled(weights.layer_lambdas.as_ref().map_or(1, Vec::len)) => None,
        None => return Err(DecorError::NoTaps),
        Some(_) => {
            if taps.len() != logits.len_of(Axis(0)) {
                return Err(DecorError::ShapeMismatch {
                    expected: format!("taps for {} samples", logits.len_of(Axis(0))),
                    found: format!("taps for {} samples", taps.len()),
                });
            }
            Some(decor_loss_multi_layer(taps, weights)?)
        }
    };
    let total = weights.weight_ce * ce
        + weights.weight_dice * dice
        + decor.as_ref().map_or(0.0, |d| d.weighted);
    Ok(CombinedLoss {
        total,
        ce,
        dice,
        decor,
    })
}
