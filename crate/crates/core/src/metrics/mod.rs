//! Binary segmentation metrics with per-volume and pooled aggregation.

use std::path::{Path, PathBuf};

use ndarray::{ArrayBase, Data, Dimension};
use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum MetricsError {
    #[error("prediction shape {pred:?} differs from ground truth {gt:?}")]
    ShapeMismatch { pred: Vec<usize>, gt: Vec<usize> },
    #[error("mask value {0} is not binary")]
    NonBinary(u8),
    #[error("cannot aggregate an empty set of volumes")]
    Empty,
    #[error("cannot write {path}: {reason}")]
    Unwritable { path: PathBuf, reason: String },
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }

    pub fn dice(&self) -> f64 {
        ratio(2 * self.tp, 2 * self.tp + self.fp + self.fn_, true)
    }

    pub fn iou(&self) -> f64 {
        ratio(self.tp, self.tp + self.fp + self.fn_, true)
    }

    /// Empty prediction scores 1 only if the ground truth is empty too.
    pub fn precision(&self) -> f64 {
        ratio(self.tp, self.tp + self.fp, self.fn_ == 0)
    }

    /// Empty ground truth scores 1 only if the prediction is empty too.
    pub fn recall(&self) -> f64 {
        ratio(self.tp, self.tp + self.fn_, self.fp == 0)
    }

    pub fn summary(&self) -> MetricSummary {
        MetricSummary {
            dice: self.dice(),
            iou: self.iou(),
            precision: self.precision(),
            recall: self.recall(),
        }
    }
}

impl std::ops::Add for ConfusionCounts {
    type Output = Self;
    fn add(self, o: Self) -> Self {
        Self {
            tp: self.tp + o.tp,
            fp: self.fp + o.fp,
            fn_: self.fn_ + o.fn_,
            tn: self.tn + o.tn,
        }
    }
}

impl std::ops::AddAssign for ConfusionCounts {
    fn add_assign(&mut self, o: Self) {
        *self = *self + o;
    }
}

impl std::iter::Sum for ConfusionCounts {
    fn sum<I: Iterator<Item = Self>>(iter: I) -> Self {
        iter.fold(Self::default(), |a, b| a + b)
    }
}

fn ratio(num: u64, den: u64, empty_agrees: bool) -> f64 {
    if den == 0 {
        if empty_agrees { 1.0 } else { 0.0 }
    } else {
        num as f64 / den as f64
    }
}

pub fn confusion_counts<S, T, D>(pred: &ArrayBase<S, D>, gt: &ArrayBase<T, D>) -> Result<ConfusionCounts, MetricsError>
where
    S: Data<Elem = u8>,
    T: Data<Elem = u8>,
    D: Dimension,
{
    if pred.shape() != gt.shape() {
        return Err(MetricsError::ShapeMismatch {
            pred: pred.shape().to_vec(),
            gt: gt.shape().to_vec(),
        });
    }
    let mut c = ConfusionCounts::default();
    for (&p, &g) in pred.iter().zip(gt.iter()) {
        match (p, g) {
            (1, 1) => c.tp += 1,
            (1, 0) => c.fp += 1,
            (0, 1) => c.fn_ += 1,
            (0, 0) => c.tn += 1,
            (v, 0 | 1) | (_, v) => return Err(MetricsError::NonBinary(v)),
        }
    }
    Ok(c)
}

pub fn dice(c: &ConfusionCounts) -> f64 {
    c.dice()
}

pub fn iou(c: &ConfusionCounts) -> f64 {
    c.iou()
}

pub fn precision(c: &ConfusionCounts) -> f64 {
    c.precision()
}

pub fn recall(c: &ConfusionCounts) -> f64 {
    c.recall()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub dice: f64,
    pub iou: f64,
    pub precision: f64,
    pub recall: f64,
}

impl MetricSummary {
    fn mean<'a>(items: impl ExactSizeIterator<Item = &'a MetricSummary>) -> Self {
        let n = items.len() as f64;
        let mut acc = [0.0; 4];
        for m in items {
            acc[0] += m.dice;
            acc[1] += m.iou;
            acc[2] += m.precision;
            acc[3] += m.recall;
        }
        Self {
            dice: acc[0] / n,
            iou: acc[1] / n,
            precision: acc[2] / n,
            recall: acc[3] / n,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VolumeMetrics {
    pub volume_id: String,
    pub counts: ConfusionCounts,
    pub metrics: MetricSummary,
}

impl VolumeMetrics {
    pub fn new(volume_id: impl Into<String>, counts: ConfusionCounts) -> Self {
        Self {
            volume_id: volume_id.into(),
            counts,
            metrics: counts.summary(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub volumes: Vec<VolumeMetrics>,
    /// Unweighted mean over volumes.
    pub mean: MetricSummary,
    /// Metrics of the summed confusion counts.
    pub pooled: MetricSummary,
    /// Unweighted mean over slices, when slice counts were supplied.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub slice_mean: Option<MetricSummary>,
}

pub fn aggregate(rows: Vec<VolumeMetrics>) -> Result<MetricsReport, MetricsError> {
    if rows.is_empty() {
        return Err(MetricsError::Empty);
    }
    let mean = MetricSummary::mean(rows.iter().map(|r| &r.metrics));
    let pooled = rows.iter().map(|r| r.counts).sum::<ConfusionCounts>().summary();
    Ok(MetricsReport {
        volumes: rows,
        mean,
        pooled,
        slice_mean: None,
    })
}

/// Unweighted mean of per-slice metrics.
pub fn slice_mean(slices: &[ConfusionCounts]) -> Result<MetricSummary, MetricsError> {
    if slices.is_empty() {
        return Err(MetricsError::Empty);
    }
    let summaries: Vec<MetricSummary> = slices.iter().map(ConfusionCounts::summary).collect();
    Ok(MetricSummary::mean(summaries.iter()))
}

impl MetricsReport {
    /// Per-volume rows followed by `mean` and `pooled` footer rows.
    pub fn write_csv(&self, path: &Path) -> Result<(), MetricsError> {
        let unwritable = |e: &dyn std::fmt::Display| MetricsError::Unwritable {
            path: path.to_path_buf(),
            reason: e.to_string(),
        };
        let mut w = csv::Writer::from_path(path).map_err(|e| unwritable(&e))?;
        w.write_record(["volume_id", "dice", "iou", "precision", "recall", "tp", "fp", "fn", "tn"])
            .map_err(|e| unwritable(&e))?;
        let row = |id: &str, m: &MetricSummary, c: Option<&ConfusionCounts>| {
            let mut r = vec![
                id.to_string(),
                m.dice.to_string(),
                m.iou.to_string(),
                m.precision.to_string(),
                m.recall.to_string(),
            ];
            match c {
                Some(c) => r.extend([c.tp, c.fp, c.fn_, c.tn].map(|v| v.to_string())),
                None => r.extend(std::iter::repeat_n(String::new(), 4)),
            }
            r
        };
        for v in &self.volumes {
            w.write_record(row(&v.volume_id, &v.metrics, Some(&v.counts))).map_err(|e| unwritable(&e))?;
        }
        let pooled_counts: ConfusionCounts = self.volumes.iter().map(|v| v.counts).sum();
        w.write_record(row("mean", &self.mean, None)).map_err(|e| unwritable(&e))?;
        w.write_record(row("pooled", &self.pooled, Some(&pooled_counts))).map_err(|e| unwritable(&e))?;
        if let Some(s) = &self.slice_mean {
            w.write_record(row("slice_mean", s, None)).map_err(|e| unwritable(&e))?;
        }
        w.flush().map_err(|e| unwritable(&e))
    }

    pub fn write_json(&self, path: &Path) -> Result<(), MetricsError> {
        let text = serde_json::to_string_pretty(self).expect("report serialises");
        std::fs::write(path, text + "\n").map_err(|e| MetricsError::Unwritable {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })
    }
}
