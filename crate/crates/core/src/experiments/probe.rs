use std::path::Path;

use candle_core::{Device, Tensor};
use ndarray::Array2;
use serde::Serialize;

use crate::decor::{decor_loss_forward, ProbabilityMap};
use crate::model::{tensor_to_feature_map, Network, DEPTH};
use crate::Error;

/// Encoder unit inspected by default (1-based).
pub const DEFAULT_PROBE_LAYER: usize = 2;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ProbeResult {
    /// 1-based encoder unit.
    pub layer: usize,
    pub slices: usize,
    /// Probability map averaged over all slices.
    #[serde(skip)]
    pub matrix: Array2<f64>,
    /// `Σ x_ii / C` of the averaged map.
    pub mean_diagonal_mass: f64,
    pub max_row_sum_error: f64,
    /// Slices in which at least one channel was dead.
    pub slices_with_dead_channels: usize,
}

impl ProbeResult {
    pub fn channels(&self) -> usize {
        self.matrix.nrows()
    }

    /// Matrix as headerless CSV, one row per channel.
    pub fn write_matrix_csv(&self, path: &Path) -> Result<(), Error> {
        let mut w = csv::WriterBuilder::new()
            .has_headers(false)
            .from_path(path)
            .map_err(|e| Error::Io(std::io::Error::other(e)))?;
        for row in self.matrix.rows() {
            w.write_record(row.iter().map(|v| v.to_string()))
                .map_err(|e| Error::Io(std::io::Error::other(e)))?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Averages the probability map of encoder unit `layer` (1-based) over every
/// slice in `images`.
pub fn probe_correlation(
    network: &Network,
    images: &[Array2<f32>],
    layer: usize,
    batch_size: usize,
    epsilon: f64,
) -> Result<ProbeResult, Error> {
    if layer == 0 || layer > DEPTH {
        return Err(Error::Config(format!("probe layer {layer} is outside 1..={DEPTH}")));
    }
    if images.is_empty() {
        return Err(crate::data::DataError::EmptyPartition("probe".into()).into());
    }
    let (h, w) = images[0].dim();
    let mut sum: Option<Array2<f64>> = None;
    let mut dead = 0;
    for chunk in images.chunks(batch_size.max(1)) {
        let mut buf = Vec::with_capacity(chunk.len() * h * w);
        for img in chunk {
            if img.dim() != (h, w) {
                return Err(Error::Config("probe slices must share a size".into()));
            }
            buf.extend(img.iter().copied());
        }
        let x = Tensor::from_vec(buf, (chunk.len(), 1, h, w), &Device::Cpu)?;
        let (_, taps) = network.forward_with_taps(&x)?;
        let tap = &taps.taps[layer - 1];
        for b in 0..chunk.len() {
            let fm = tensor_to_feature_map(&tap.get(b)?, layer - 1)?;
            let p: ProbabilityMap = decor_loss_forward(&fm, epsilon)?.probability_map;
            if !p.degenerate_rows.is_empty() {
                dead += 1;
            }
            match sum.as_mut() {
                Some(s) => *s += &p.values,
                None => sum = Some(p.values),
            }
        }
    }
    let matrix = sum.expect("at least one slice") / images.len() as f64;
    let avg = ProbabilityMap {
        values: matrix,
        degenerate_rows: Vec::new(),
    };
    let max_row_sum_error = avg.row_sums().iter().fold(0f64, |m, s| m.max((s - 1.0).abs()));
    Ok(ProbeResult {
        layer,
        slices: images.len(),
        mean_diagonal_mass: avg.mean_diagonal_mass(),
        matrix: avg.values,
        max_row_sum_error,
        slices_with_dead_channels: dead,
    })
}
