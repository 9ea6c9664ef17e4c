use candle_core::{DType, Device, Tensor};
use ndarray::{s, Array2};
use rayon::prelude::*;

use crate::data::VolumeSlices;
use crate::metrics::{aggregate, confusion_counts, slice_mean, ConfusionCounts, MetricsReport, VolumeMetrics};
use crate::model::{Network, DOWNSAMPLE_FACTOR};
use crate::Error;

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Foreground probabilities for same-sized slices. Slices whose sides are not
/// multiples of 16 are zero-padded at the bottom/right and cropped back.
pub fn predict_probabilities(network: &Network, images: &[Array2<f32>], batch_size: usize) -> Result<Vec<Array2<f64>>, Error> {
    let Some(first) = images.first() else {
        return Ok(Vec::new());
    };
    let (h, w) = first.dim();
    if let Some(other) = images.iter().find(|i| i.dim() != (h, w)) {
        return Err(Error::Config(format!(
            "slices in one prediction call must share a size: {:?} vs {:?}",
            (h, w),
            other.dim()
        )));
    }
    let pad = |v: usize| v.div_ceil(DOWNSAMPLE_FACTOR).max(1) * DOWNSAMPLE_FACTOR;
    let (ph, pw) = (pad(h), pad(w));
    let mut out = Vec::with_capacity(images.len());
    for chunk in images.chunks(batch_size.max(1)) {
        let mut buf = vec![0f32; chunk.len() * ph * pw];
        for (b, img) in chunk.iter().enumerate() {
            let mut padded = ndarray::ArrayViewMut2::from_shape((ph, pw), &mut buf[b * ph * pw..(b + 1) * ph * pw])
                .expect("buffer sized for the padded slice");
            padded.slice_mut(s![..h, ..w]).assign(img);
        }
        let x = Tensor::from_vec(buf, (chunk.len(), 1, ph, pw), &Device::Cpu)?;
        let logits = network.forward(&x)?.to_dtype(DType::F64)?;
        let flat = logits.flatten_all()?.to_vec1::<f64>()?;
        for b in 0..chunk.len() {
            let full = Array2::from_shape_vec((ph, pw), flat[b * ph * pw..(b + 1) * ph * pw].to_vec())
                .expect("logits match the padded slice");
            out.push(full.slice(s![..h, ..w]).mapv(sigmoid));
        }
    }
    Ok(out)
}

/// Binary masks with `p >= threshold`.
pub fn predict_masks(
    network: &Network,
    images: &[Array2<f32>],
    batch_size: usize,
    threshold: f64,
) -> Result<Vec<Array2<u8>>, Error> {
    Ok(predict_probabilities(network, images, batch_size)?
        .into_iter()
        .map(|p| p.mapv(|v| u8::from(v >= threshold)))
        .collect())
}

/// Per-volume metrics of slice-by-slice predictions, plus pooled and
/// per-slice means.
pub fn evaluate_volumes(
    network: &Network,
    volumes: &[VolumeSlices],
    threshold: f64,
    batch_size: usize,
    parallel: bool,
) -> Result<MetricsReport, Error> {
    let run = |v: &VolumeSlices| -> Result<(VolumeMetrics, Vec<ConfusionCounts>), Error> {
        let images: Vec<Array2<f32>> = v.slices.iter().map(|s| s.image.clone()).collect();
        let masks = predict_masks(network, &images, batch_size, threshold)?;
        let slices = masks
            .iter()
            .zip(&v.slices)
            .map(|(p, s)| confusion_counts(p, &s.mask))
            .collect::<Result<Vec<_>, _>>()?;
        let total: ConfusionCounts = slices.iter().copied().sum();
        Ok((VolumeMetrics::new(v.volume_id.clone(), total), slices))
    };
    let results: Vec<_> = if parallel {
        volumes.par_iter().map(run).collect::<Result<_, _>>()?
    } else {
        volumes.iter().map(run).collect::<Result<_, _>>()?
    };
    let mut rows = Vec::with_capacity(results.len());
    let mut slices = Vec::new();
    for (row, s) in results {
        rows.push(row);
        slices.extend(s);
    }
    let mut report = aggregate(rows)?;
    report.slice_mean = Some(slice_mean(&slices)?);
    Ok(report)
}
