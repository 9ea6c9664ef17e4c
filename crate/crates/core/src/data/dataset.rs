use std::collections::HashMap;

use rayon::prelude::*;

use super::{load_volume, normalize_intensity, DataError, IntensityWindow, ManifestEntry, SliceSample};
use crate::model::DOWNSAMPLE_FACTOR;

/// All normalised slices of one volume, in slice order.
#[derive(Debug, Clone, PartialEq)]
pub struct VolumeSlices {
    pub volume_id: String,
    pub slices: Vec<SliceSample>,
}

impl VolumeSlices {
    pub fn shape(&self) -> (usize, usize, usize) {
        let (h, w) = self.slices.first().map_or((0, 0), SliceSample::shape);
        (self.slices.len(), h, w)
    }
}

/// Loads and windows the volumes named in `ids`, in that order.
pub fn load_partition(
    entries: &[ManifestEntry],
    ids: &[String],
    window: IntensityWindow,
) -> Result<Vec<VolumeSlices>, DataError> {
    let window = IntensityWindow::new(window.low, window.high)?;
    let by_id: HashMap<&str, &ManifestEntry> = entries.iter().map(|e| (e.volume_id.as_str(), e)).collect();
    let selected = ids
        .iter()
        .map(|id| by_id.get(id.as_str()).copied().ok_or_else(|| DataError::MissingVolume(id.clone())))
        .collect::<Result<Vec<_>, _>>()?;
    selected
        .par_iter()
        .map(|e| {
            let mut vol = load_volume(&e.image, &e.mask, &e.volume_id)?;
            let (_, h, w) = vol.voxels.dim();
            if h % DOWNSAMPLE_FACTOR != 0 || w % DOWNSAMPLE_FACTOR != 0 {
                return Err(DataError::SliceSize {
                    volume_id: e.volume_id.clone(),
                    height: h,
                    width: w,
                });
            }
            vol.voxels = normalize_intensity(&vol.voxels, window)?;
            Ok(VolumeSlices {
                volume_id: e.volume_id.clone(),
                slices: vol.slices(),
            })
        })
        .collect()
}

/// Flattens volumes into training slices, optionally skipping empty masks.
pub fn training_slices(volumes: &[VolumeSlices], keep_empty: bool) -> Vec<SliceSample> {
    volumes
        .iter()
        .flat_map(|v| v.slices.iter())
        .filter(|s| keep_empty || s.foreground() > 0)
        .cloned()
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synthetic::{write_synthetic_corpus, SyntheticCorpus};
    use crate::data::read_manifest;

    #[test]
    fn loads_requested_volumes_in_order() {
        let dir = tempfile::tempdir().unwrap();
        let corpus = SyntheticCorpus {
            volumes: 3,
            slices_per_volume: 2,
            size: 32,
            ..SyntheticCorpus::default()
        };
        let manifest = write_synthetic_corpus(dir.path(), &corpus).unwrap();
        let entries = read_manifest(&manifest).unwrap();
        let ids = vec![entries[2].volume_id.clone(), entries[0].volume_id.clone()];
        let vols = load_partition(&entries, &ids, IntensityWindow::default()).unwrap();
        assert_eq!(vols.len(), 2);
        assert_eq!(vols[0].volume_id, ids[0]);
        assert_eq!(vols[0].shape(), (2, 32, 32));
        assert!(vols[0].slices[0].image.iter().all(|v| (0.0..=1.0).contains(v)));
        let all = training_slices(&vols, true);
        assert_eq!(all.len(), 4);
        assert!(training_slices(&vols, false).iter().all(|s| s.foreground() > 0));

        let missing = vec!["nope".to_string()];
        assert!(matches!(
            load_partition(&entries, &missing, IntensityWindow::default()),
            Err(DataError::MissingVolume(_))
        ));
    }

    #[test]
    fn rejects_indivisible_slices() {
        let dir = tempfile::tempdir().unwrap();
        let corpus = SyntheticCorpus {
            volumes: 1,
            slices_per_volume: 1,
            size: 24,
            ..SyntheticCorpus::default()
        };
        let entries = read_manifest(&write_synthetic_corpus(dir.path(), &corpus).unwrap()).unwrap();
        let ids = vec![entries[0].volume_id.clone()];
        assert!(matches!(
            load_partition(&entries, &ids, IntensityWindow::default()),
            Err(DataError::SliceSize { .. })
        ));
    }
}
