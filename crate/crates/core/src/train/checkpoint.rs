use std::collections::HashMap;
use std::path::Path;

use candle_core::Device;
use serde::{Deserialize, Serialize};

use super::config::TrainConfig;
use super::scheduler::PlateauState;
use crate::metrics::MetricSummary;
use crate::model::{read_archive, Network, NetworkSpec};
use crate::Error;

const METADATA_KEY: &str = "decornet";

/// Everything stored next to the weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub spec: NetworkSpec,
    pub epoch: usize,
    pub iterations: usize,
    pub val_metrics: Option<MetricSummary>,
    pub scheduler: PlateauState,
    pub config_hash: String,
    pub config: TrainConfig,
}

pub fn save_checkpoint(path: &Path, network: &Network, meta: &CheckpointMeta) -> Result<(), Error> {
    let json = serde_json::to_string(meta).map_err(|e| Error::Checkpoint(e.to_string()))?;
    network.save(path, HashMap::from([(METADATA_KEY.to_string(), json)]))?;
    Ok(())
}

pub fn load_checkpoint(path: &Path, device: &Device) -> Result<(Network, CheckpointMeta), Error> {
    let bad = |reason: String| Error::Checkpoint(format!("{}: {reason}", path.display()));
    let (tensors, metadata) = read_archive(path, device).map_err(|e| bad(e.to_string()))?;
    let json = metadata
        .get(METADATA_KEY)
        .ok_or_else(|| bad("no training metadata".into()))?;
    let meta: CheckpointMeta = serde_json::from_str(json).map_err(|e| bad(e.to_string()))?;
    let network = Network::from_tensors(&meta.spec, &tensors, device).map_err(|e| bad(e.to_string()))?;
    Ok((network, meta))
}
