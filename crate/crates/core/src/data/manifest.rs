use std::collections::HashSet;
use std::path::{Path, PathBuf};

use super::DataError;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub image: PathBuf,
    pub mask: PathBuf,
    pub volume_id: String,
}

/// Reads `image_path, mask_path, volume_id` lines. Relative paths are
/// resolved against the manifest's directory; `#` starts a comment line.
pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>, DataError> {
    let file = std::fs::File::open(path).map_err(|e| DataError::Unreadable {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .comment(Some(b'#'))
        .flexible(true)
        .from_reader(file);
    let mut entries = Vec::new();
    let mut ids = HashSet::new();
    for record in reader.records() {
        let record = record.map_err(|e| DataError::Manifest {
            path: path.to_path_buf(),
            line: e.position().map_or(0, |p| p.line() as usize),
            reason: e.to_string(),
        })?;
        let line = record.position().map_or(0, |p| p.line() as usize);
        let bad = |reason: String| DataError::Manifest {
            path: path.to_path_buf(),
            line,
            reason,
        };
        if record.len() == 1 && record[0].is_empty() {
            continue;
        }
        if record.len() != 3 {
            return Err(bad(format!("expected 3 fields, found {}", record.len())));
        }
        let volume_id = record[2].to_string();
        if volume_id.is_empty() {
            return Err(bad("empty volume id".into()));
        }
        if !ids.insert(volume_id.clone()) {
            return Err(bad(format!("duplicate volume id {volume_id}")));
        }
        entries.push(ManifestEntry {
            image: base.join(&record[0]),
            mask: base.join(&record[1]),
            volume_id,
        });
    }
    Ok(entries)
}

pub fn write_manifest(path: &Path, entries: &[ManifestEntry]) -> Result<(), DataError> {
    let unwritable = |reason: String| DataError::Unwritable {
        path: path.to_path_buf(),
        reason,
    };
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_path(path)
        .map_err(|e| unwritable(e.to_string()))?;
    for e in entries {
        w.write_record([
            e.image.to_string_lossy().as_ref(),
            e.mask.to_string_lossy().as_ref(),
            e.volume_id.as_str(),
        ])
        .map_err(|e| unwritable(e.to_string()))?;
    }
    w.flush().map_err(|e| unwritable(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_relative_paths_and_comments() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("manifest.csv");
        std::fs::write(
            &path,
            "# image, mask, id\nimg/a.nii.gz, masks/a.nii.gz, a\n\n/abs/b.nii, /abs/b_mask.nii, b\n",
        )
        .unwrap();
        let m = read_manifest(&path).unwrap();
        assert_eq!(m.len(), 2);
        assert_eq!(m[0].image, dir.path().join("img/a.nii.gz"));
        assert_eq!(m[1].mask, PathBuf::from("/abs/b_mask.nii"));
        assert_eq!(m[1].volume_id, "b");
    }

    #[test]
    fn rejects_bad_lines() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("manifest.csv");
        std::fs::write(&path, "a.nii, a\n").unwrap();
        assert!(matches!(read_manifest(&path), Err(DataError::Manifest { .. })));
        std::fs::write(&path, "a.nii,am.nii,x\nb.nii,bm.nii,x\n").unwrap();
        assert!(matches!(read_manifest(&path), Err(DataError::Manifest { .. })));
        assert!(matches!(
            read_manifest(&dir.path().join("missing.csv")),
            Err(DataError::Unreadable { .. })
        ));
    }
}
