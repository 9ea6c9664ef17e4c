//! Procedural slices with geometric "lesions" for smoke tests and demos.

use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{write_manifest, write_nifti_f32, write_nifti_u8, DataError, IntensityWindow, ManifestEntry, SliceSample};
use crate::util::derive_seed;

/// Background and lesion intensities in normalised units.
const BACKGROUND: f32 = 0.2;
const LESION: f32 = 0.65;

#[derive(Debug, Clone, Copy, PartialEq)]
enum Shape {
    Ellipse { cy: f32, cx: f32, ry: f32, rx: f32 },
    Rect { y0: f32, x0: f32, y1: f32, x1: f32 },
}

impl Shape {
    fn contains(&self, y: f32, x: f32) -> bool {
        match *self {
            Shape::Ellipse { cy, cx, ry, rx } => ((y - cy) / ry).powi(2) + ((x - cx) / rx).powi(2) <= 1.0,
            Shape::Rect { y0, x0, y1, x1 } => (y0..=y1).contains(&y) && (x0..=x1).contains(&x),
        }
    }

    fn random(rng: &mut ChaCha8Rng, size: f32) -> Self {
        let r_lo = size * 0.08;
        let r_hi = size * 0.22;
        let ry = rng.random_range(r_lo..r_hi);
        let rx = rng.random_range(r_lo..r_hi);
        let cy = rng.random_range(ry..size - ry);
        let cx = rng.random_range(rx..size - rx);
        if rng.random_bool(0.5) {
            Shape::Ellipse { cy, cx, ry, rx }
        } else {
            Shape::Rect {
                y0: cy - ry,
                x0: cx - rx,
                y1: cy + ry,
                x1: cx + rx,
            }
        }
    }
}

/// A normalised `size`×`size` slice with 1 to 3 bright shapes (none when
/// `empty`) on a noisy background. The mask marks the shapes.
pub fn synthetic_slice(size: usize, seed: u64, volume_id: &str, slice_index: usize, empty: bool) -> SliceSample {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[
        &seed.to_le_bytes(),
        volume_id.as_bytes(),
        &(slice_index as u64).to_le_bytes(),
    ]));
    let n_shapes = if empty { 0 } else { rng.random_range(1..=3) };
    let shapes: Vec<Shape> = (0..n_shapes).map(|_| Shape::random(&mut rng, size as f32)).collect();
    let mask = Array2::from_shape_fn((size, size), |(y, x)| {
        u8::from(shapes.iter().any(|s| s.contains(y as f32 + 0.5, x as f32 + 0.5)))
    });
    let image = Array2::from_shape_fn((size, size), |(y, x)| {
        let base = if mask[[y, x]] == 1 { LESION } else { BACKGROUND };
        (base + rng.random_range(-0.05f32..0.05)).clamp(0.0, 1.0)
    });
    SliceSample {
        image,
        mask,
        volume_id: volume_id.to_string(),
        slice_index,
    }
}

/// `n` non-empty slices from a single synthetic volume.
pub fn synthetic_slices(n: usize, size: usize, seed: u64) -> Vec<SliceSample> {
    (0..n).map(|i| synthetic_slice(size, seed, "synthetic", i, false)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticCorpus {
    pub volumes: usize,
    pub slices_per_volume: usize,
    pub size: usize,
    /// Chance that a slice has no lesion.
    pub empty_probability: f64,
    pub seed: u64,
}

impl Default for SyntheticCorpus {
    fn default() -> Self {
        Self {
            volumes: 8,
            slices_per_volume: 4,
            size: 64,
            empty_probability: 0.25,
            seed: 0,
        }
    }
}

/// Builds one volume in Hounsfield units (inverse of the default window).
pub fn synthetic_volume(corpus: &SyntheticCorpus, volume_id: &str) -> (Array3<f32>, Array3<u8>) {
    let window = IntensityWindow::default();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[&corpus.seed.to_le_bytes(), volume_id.as_bytes(), b"empty"]));
    let n = corpus.size;
    let mut hu = Array3::zeros((corpus.slices_per_volume, n, n));
    let mut mask = Array3::zeros((corpus.slices_per_volume, n, n));
    for z in 0..corpus.slices_per_volume {
        let empty = rng.random_bool(corpus.empty_probability.clamp(0.0, 1.0));
        let s = synthetic_slice(n, corpus.seed, volume_id, z, empty);
        let span = (window.high - window.low) as f32;
        hu.index_axis_mut(ndarray::Axis(0), z)
            .assign(&s.image.mapv(|v| window.low as f32 + v * span));
        mask.index_axis_mut(ndarray::Axis(0), z).assign(&s.mask);
    }
    (hu, mask)
}

/// Writes `corpus.volumes` image/mask NIfTI pairs plus `manifest.csv` under
/// `dir`, returning the manifest path.
pub fn write_synthetic_corpus(dir: &Path, corpus: &SyntheticCorpus) -> Result<PathBuf, DataError> {
    std::fs::create_dir_all(dir).map_err(|e| DataError::Unwritable {
        path: dir.to_path_buf(),
        reason: e.to_string(),
    })?;
    let mut entries = Vec::with_capacity(corpus.volumes);
    for v in 0..corpus.volumes {
        let id = format!("synth_{v:03}");
        let (hu, mask) = synthetic_volume(corpus, &id);
        let image = PathBuf::from(format!("{id}.nii.gz"));
        let mask_path = PathBuf::from(format!("{id}_mask.nii.gz"));
        write_nifti_f32(&dir.join(&image), hu.view())?;
        write_nifti_u8(&dir.join(&mask_path), mask.view(), None)?;
        entries.push(ManifestEntry {
            image,
            mask: mask_path,
            volume_id: id,
        });
    }
    let manifest = dir.join("manifest.csv");
    write_manifest(&manifest, &entries)?;
    Ok(manifest)
}
