use std::path::Path;

use ndarray::{Array3, ArrayView3, Axis};
use nifti::writer::WriterOptions;
use nifti::{IntoNdArray, NiftiObject, ReaderOptions};

use super::{DataError, SliceSample};

/// A CT volume stored as `(slices, rows, cols)` with its binary mask.
#[derive(Debug, Clone, PartialEq)]
pub struct CtVolume {
    pub voxels: Array3<f32>,
    pub mask: Array3<u8>,
    pub volume_id: String,
}

impl CtVolume {
    pub fn new(voxels: Array3<f32>, mask: Array3<u8>, volume_id: impl Into<String>) -> Result<Self, DataError> {
        let volume_id = volume_id.into();
        if voxels.dim() != mask.dim() {
            return Err(DataError::ShapeMismatch {
                volume_id,
                image: voxels.shape().to_vec(),
                mask: mask.shape().to_vec(),
            });
        }
        Ok(Self {
            voxels,
            mask: mask.mapv(|m| u8::from(m != 0)),
            volume_id,
        })
    }

    pub fn num_slices(&self) -> usize {
        self.voxels.len_of(Axis(0))
    }

    /// Slices in order; images are copied as-is, so normalise first.
    pub fn slices(&self) -> Vec<SliceSample> {
        self.voxels
            .outer_iter()
            .zip(self.mask.outer_iter())
            .enumerate()
            .map(|(i, (img, m))| SliceSample {
                image: img.to_owned(),
                mask: m.to_owned(),
                volume_id: self.volume_id.clone(),
                slice_index: i,
            })
            .collect()
    }
}

/// Reads a 3-D NIfTI file into `(slices, rows, cols)` order.
pub fn read_nifti(path: &Path) -> Result<Array3<f32>, DataError> {
    let unreadable = |reason: String| DataError::Unreadable {
        path: path.to_path_buf(),
        reason,
    };
    let obj = ReaderOptions::new()
        .read_file(path)
        .map_err(|e| unreadable(e.to_string()))?;
    let arr = obj
        .into_volume()
        .into_ndarray::<f32>()
        .map_err(|e| unreadable(e.to_string()))?;
    let arr = match arr.ndim() {
        3 => arr,
        // trailing singleton time axis
        4 if arr.shape()[3] == 1 => arr.index_axis_move(Axis(3), 0),
        n => return Err(unreadable(format!("expected a 3-D volume, found {n} dimensions"))),
    };
    let arr = arr
        .into_dimensionality::<ndarray::Ix3>()
        .map_err(|e| unreadable(e.to_string()))?;
    // nifti (x, y, z) -> (z, y, x)
    Ok(arr.permuted_axes([2, 1, 0]).as_standard_layout().into_owned())
}

fn to_nifti_order<T: Clone>(data: ArrayView3<'_, T>) -> Array3<T> {
    data.permuted_axes([2, 1, 0]).as_standard_layout().into_owned()
}

pub fn write_nifti_f32(path: &Path, data: ArrayView3<'_, f32>) -> Result<(), DataError> {
    WriterOptions::new(path)
        .write_nifti(&to_nifti_order(data))
        .map_err(|e| DataError::Unwritable {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })
}

/// Writes a `(slices, rows, cols)` u8 volume, copying geometry from
/// `reference` when given.
pub fn write_nifti_u8(path: &Path, data: ArrayView3<'_, u8>, reference: Option<&Path>) -> Result<(), DataError> {
    let unwritable = |reason: String| DataError::Unwritable {
        path: path.to_path_buf(),
        reason,
    };
    let header = match reference {
        Some(r) => Some(
            ReaderOptions::new()
                .read_file(r)
                .map_err(|e| unwritable(format!("reference {}: {e}", r.display())))?
                .header()
                .clone(),
        ),
        None => None,
    };
    let mut opts = WriterOptions::new(path);
    if let Some(h) = header.as_ref() {
        opts = opts.reference_header(h);
    }
    opts.write_nifti(&to_nifti_order(data))
        .map_err(|e| unwritable(e.to_string()))
}

/// Loads an image volume and its mask; the mask is binarised at 0.5 after
/// scaling label maps stored as {0, 255} into {0, 1}.
pub fn load_volume(image_path: &Path, mask_path: &Path, volume_id: &str) -> Result<CtVolume, DataError> {
    if !mask_path.exists() {
        return Err(DataError::MissingMask(mask_path.to_path_buf()));
    }
    let voxels = read_nifti(image_path)?;
    let raw_mask = read_nifti(mask_path)?;
    if voxels.dim() != raw_mask.dim() {
        return Err(DataError::ShapeMismatch {
            volume_id: volume_id.to_string(),
            image: voxels.shape().to_vec(),
            mask: raw_mask.shape().to_vec(),
        });
    }
    let peak = raw_mask.fold(0f32, |m, &v| m.max(v));
    let scale = if peak > 1.0 { peak } else { 1.0 };
    let mask = raw_mask.mapv(|v| u8::from(v / scale >= 0.5));
    CtVolume::new(voxels, mask, volume_id)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_pair(dir: &Path, slices: usize, mask_slices: usize, mask_value: u8) -> (std::path::PathBuf, std::path::PathBuf) {
        let img = Array3::from_shape_fn((slices, 512, 512), |(z, y, x)| (z * 7 + y + x) as f32 - 1000.0);
        let mask = Array3::from_shape_fn((mask_slices, 512, 512), |(_, y, x)| {
            if y < 100 && x > 300 { mask_value } else { 0 }
        });
        let ip = dir.join("img.nii.gz");
        let mp = dir.join("mask.nii.gz");
        write_nifti_f32(&ip, img.view()).unwrap();
        write_nifti_u8(&mp, mask.view(), None).unwrap();
        (ip, mp)
    }

    #[test]
    fn loads_well_formed_volume() {
        let dir = tempfile::tempdir().unwrap();
        let (ip, mp) = write_pair(dir.path(), 4, 4, 1);
        let v = load_volume(&ip, &mp, "v0").unwrap();
        assert_eq!(v.num_slices(), 4);
        assert_eq!(v.voxels.dim(), (4, 512, 512));
        assert_eq!(v.voxels[[2, 10, 20]], (14 + 30) as f32 - 1000.0);
        assert_eq!(v.mask[[0, 5, 400]], 1);
        assert_eq!(v.mask[[0, 200, 400]], 0);
        assert_eq!(v.slices().len(), 4);
    }

    #[test]
    fn rejects_mask_shape_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let (ip, mp) = write_pair(dir.path(), 4, 3, 1);
        assert!(matches!(
            load_volume(&ip, &mp, "v0"),
            Err(DataError::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn binarises_255_labels() {
        let dir = tempfile::tempdir().unwrap();
        let (ip, mp) = write_pair(dir.path(), 1, 1, 255);
        let v = load_volume(&ip, &mp, "v0").unwrap();
        assert!(v.mask.iter().all(|&m| m <= 1));
        assert_eq!(v.mask.iter().filter(|&&m| m == 1).count(), 100 * 211);
    }

    #[test]
    fn missing_and_unreadable_files() {
        let dir = tempfile::tempdir().unwrap();
        let (ip, _) = write_pair(dir.path(), 1, 1, 1);
        assert!(matches!(
            load_volume(&ip, &dir.path().join("nope.nii"), "v"),
            Err(DataError::MissingMask(_))
        ));
        let junk = dir.path().join("junk.nii");
        std::fs::write(&junk, b"not a nifti file").unwrap();
        assert!(matches!(
            load_volume(&junk, &ip, "v"),
            Err(DataError::Unreadable { .. })
        ));
    }
}
