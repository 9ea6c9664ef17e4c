//! Single-file weight archives: safetensors with string metadata in the header.

use std::collections::HashMap;
use std::path::Path;

use candle_core::{Device, Tensor, Var};

use super::ModelError;

pub(crate) fn write(
    path: &Path,
    vars: &[(String, Var)],
    metadata: HashMap<String, String>,
) -> Result<(), ModelError> {
    let tensors: Vec<(&str, &Tensor)> = vars.iter().map(|(k, v)| (k.as_str(), v.as_tensor())).collect();
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    safetensors::serialize_to_file(tensors, Some(metadata), path)
        .map_err(|e| ModelError::Archive(format!("{}: {e}", path.display())))
}

/// Named tensors and string metadata.
pub type Archive = (HashMap<String, Tensor>, HashMap<String, String>);

pub(crate) fn read(
    path: &Path,
    device: &Device,
) -> Result<Archive, ModelError> {
    let bytes = std::fs::read(path)?;
    let (_, header) = safetensors::SafeTensors::read_metadata(&bytes)
        .map_err(|e| ModelError::Archive(format!("{}: {e}", path.display())))?;
    let metadata = header.metadata().clone().unwrap_or_default();
    let tensors = candle_core::safetensors::load_buffer(&bytes, device)
        .map_err(|e| ModelError::Archive(format!("{}: {e}", path.display())))?;
    Ok((tensors, metadata))
}
