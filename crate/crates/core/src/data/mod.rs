//! CT volume ingestion, intensity windowing, volume-level splitting and
//! training-time augmentation.

mod augment;
mod dataset;
mod manifest;
mod normalize;
mod split;
pub mod synthetic;
mod volume;

use std::path::PathBuf;

use ndarray::Array2;

pub use augment::{augment, AugmentOutcome, AugmentationPolicy, ElasticParams, MirrorAxes};
pub use dataset::{load_partition, training_slices, VolumeSlices};
pub use manifest::{read_manifest, write_manifest, ManifestEntry};
pub use normalize::{normalize_intensity, normalize_value, IntensityWindow};
pub use split::{read_split_file, split_dataset, write_split_file, DatasetSplit, Partition, REFERENCE_SPLIT};
pub use volume::{load_volume, read_nifti, write_nifti_f32, write_nifti_u8, CtVolume};

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("cannot read {path}: {reason}")]
    Unreadable { path: PathBuf, reason: String },
    #[error("mask file not found: {0}")]
    MissingMask(PathBuf),
    #[error("shape mismatch in {volume_id}: image {image:?}, mask {mask:?}")]
    ShapeMismatch {
        volume_id: String,
        image: Vec<usize>,
        mask: Vec<usize>,
    },
    #[error("cannot write {path}: {reason}")]
    Unwritable { path: PathBuf, reason: String },
    #[error("invalid intensity window [{low}, {high}]")]
    DegenerateWindow { low: f64, high: f64 },
    #[error("cannot split {available} volumes: {reason}")]
    TooFewVolumes { available: usize, reason: String },
    #[error("malformed manifest {path} line {line}: {reason}")]
    Manifest {
        path: PathBuf,
        line: usize,
        reason: String,
    },
    #[error("malformed split file {path}: {reason}")]
    SplitFile { path: PathBuf, reason: String },
    #[error("the {0} partition has no slices")]
    EmptyPartition(String),
    #[error("volume {0} is not listed in the manifest")]
    MissingVolume(String),
    #[error("slice size {height}x{width} in {volume_id} is not divisible by 16")]
    SliceSize {
        volume_id: String,
        height: usize,
        width: usize,
    },
}

/// One normalised 2-D slice and its binary infection mask.
#[derive(Debug, Clone, PartialEq)]
pub struct SliceSample {
    pub image: Array2<f32>,
    pub mask: Array2<u8>,
    pub volume_id: String,
    pub slice_index: usize,
}

impl SliceSample {
    pub fn shape(&self) -> (usize, usize) {
        self.image.dim()
    }

    pub fn foreground(&self) -> usize {
        self.mask.iter().filter(|&&m| m != 0).count()
    }
}
