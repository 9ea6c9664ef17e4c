use ndarray::{Array1, Array2, Array3, Axis};

use super::{DecorError, FeatureMap};

/// Channel Gram matrix with its row maxima.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrelationMap {
    pub values: Array2<f64>,
    /// `z_i`, the largest entry of row `i`.
    pub row_normalizers: Array1<f64>,
}

impl CorrelationMap {
    pub fn channels(&self) -> usize {
        self.values.nrows()
    }
}

/// Row-normalised softmax of a [`CorrelationMap`].
#[derive(Debug, Clone, PartialEq)]
pub struct ProbabilityMap {
    pub values: Array2<f64>,
    /// Rows whose normaliser fell below epsilon and were replaced by the
    /// uniform distribution.
    pub degenerate_rows: Vec<usize>,
}

impl ProbabilityMap {
    pub fn channels(&self) -> usize {
        self.values.nrows()
    }

    /// `Σ x_ii / C`, the average probability a channel assigns to itself.
    pub fn mean_diagonal_mass(&self) -> f64 {
        self.values.diag().sum() / self.channels() as f64
    }

    pub fn row_sums(&self) -> Array1<f64> {
        self.values.sum_axis(Axis(1))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecorForward {
    pub loss: f64,
    pub probability_map: ProbabilityMap,
    pub correlation: CorrelationMap,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecorLossResult {
    pub loss: f64,
    /// dL/dH, shaped like the input feature map.
    pub gradient: Array3<f64>,
    pub probability_map: ProbabilityMap,
}

/// `c_ij = H_i · H_j` over flattened channels.
///
/// The product is computed once with a GEMM and the upper triangle is mirrored
/// so the result is exactly symmetric.
pub fn channel_correlation(features: &FeatureMap) -> Result<CorrelationMap, DecorError> {
    let flat = features.flat();
    let mut values = flat.dot(&flat.t());
    let c = values.nrows();
    for i in 0..c {
        for j in (i + 1)..c {
            values[[j, i]] = values[[i, j]];
        }
    }
    let mut row_normalizers = Array1::zeros(c);
    for (i, row) in values.outer_iter().enumerate() {
        let mut z = f64::NEG_INFINITY;
        for &v in row {
            if !v.is_finite() {
                return Err(DecorError::NonFinite {
                    layer_id: features.layer_id(),
                    channel: i,
                });
            }
            z = z.max(v);
        }
        row_normalizers[i] = z;
    }
    Ok(CorrelationMap {
        values,
        row_normalizers,
    })
}

/// `x_ij = exp(c_ij / z_i) / Σ_k exp(c_ik / z_i)`.
///
/// A row with `z_i < epsilon` belongs to a dead channel; it becomes uniform and
/// is listed in [`ProbabilityMap::degenerate_rows`].
pub fn normalized_softmax(corr: &CorrelationMap, epsilon: f64) -> ProbabilityMap {
    let c = corr.channels();
    let mut values = Array2::zeros((c, c));
    let mut degenerate_rows = Vec::new();
    for (i, (row, mut out)) in corr
        .values
        .outer_iter()
        .zip(values.outer_iter_mut())
        .enumerate()
    {
        let z = corr.row_normalizers[i];
        if !(z >= epsilon) {
            out.fill(1.0 / c as f64);
            degenerate_rows.push(i);
            continue;
        }
        let scaled = row.mapv(|v| v / z);
        let peak = scaled.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        let exps = scaled.mapv(|v| (v - peak).exp());
        let total = exps.sum();
        out.assign(&(exps / total));
    }
    if !degenerate_rows.is_empty() {
        log::debug!(
            "decor softmax: {} of {} rows degenerate, using uniform rows",
            degenerate_rows.len(),
            c
        );
    }
    ProbabilityMap {
        values,
        degenerate_rows,
    }
}

pub fn decor_loss_forward(features: &FeatureMap, epsilon: f64) -> Result<DecorForward, DecorError> {
    let correlation = channel_correlation(features)?;
    let probability_map = normalized_softmax(&correlation, epsilon);
    let loss = -probability_map.values.diag().iter().map(|x| x.ln()).sum::<f64>();
    Ok(DecorForward {
        loss,
        probability_map,
        correlation,
    })
}

/// Closed-form gradient of the decorrelation loss with `z` held constant.
///
/// Per activation this is
/// `Σ_{i≠a} (x_ai/z_a + x_ia/z_i) h_i + 2 (x_aa - 1)/z_a h_a`,
/// which in matrix form is `(A + Aᵀ) H` with `A_ij = (x_ij - δ_ij) / z_i`.
/// Degenerate rows are constant and contribute nothing.
pub fn decor_loss_backward(
    features: &FeatureMap,
    prob: &ProbabilityMap,
    corr: &CorrelationMap,
) -> Result<Array3<f64>, DecorError> {
    let c = features.channels();
    if prob.values.dim() != (c, c) || corr.values.dim() != (c, c) || corr.row_normalizers.len() != c
    {
        return Err(DecorError::ShapeMismatch {
            expected: format!("{c}x{c} probability and correlation maps"),
            found: format!(
                "probability {:?}, correlation {:?}",
                prob.values.dim(),
                corr.values.dim()
            ),
        });
    }
    let mut coeff = prob.values.clone();
    for i in 0..c {
        coeff[[i, i]] -= 1.0;
    }
    for (i, mut row) in coeff.outer_iter_mut().enumerate() {
        if prob.degenerate_rows.contains(&i) {
            row.fill(0.0);
        } else {
            row /= corr.row_normalizers[i];
        }
    }
    let sym = &coeff + &coeff.t();
    let grad = sym.dot(&features.flat());
    Ok(grad
        .into_shape_with_order(features.data().raw_dim())
        .expect("gradient keeps the feature map's element count"))
}

/// Forward and backward in one call.
pub fn decor_loss(features: &FeatureMap, epsilon: f64) -> Result<DecorLossResult, DecorError> {
    let fwd = decor_loss_forward(features, epsilon)?;
    let gradient = decor_loss_backward(features, &fwd.probability_map, &fwd.correlation)?;
    Ok(DecorLossResult {
        loss: fwd.loss,
        gradient,
        probability_map: fwd.probability_map,
    })
}

/// Mean of several probability maps with the same channel count.
pub(crate) fn mean_probability_map<'a>(
    maps: impl IntoIterator<Item = &'a ProbabilityMap>,
) -> Option<ProbabilityMap> {
    let mut acc: Option<Array2<f64>> = None;
    let mut n = 0usize;
    let mut degenerate = Vec::new();
    for m in maps {
        n += 1;
        degenerate.extend(m.degenerate_rows.iter().copied());
        match acc.as_mut() {
            Some(a) => *a += &m.values,
            None => acc = Some(m.values.clone()),
        }
    }
    degenerate.sort_unstable();
    degenerate.dedup();
    acc.map(|a| ProbabilityMap {
        values: a / n as f64,
        degenerate_rows: degenerate,
    })
}
