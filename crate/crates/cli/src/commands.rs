use std::path::{Path, PathBuf};

use candle_core::Device;
use decornet_core::data::synthetic::{write_synthetic_corpus, SyntheticCorpus};
use decornet_core::data::{
    load_partition, normalize_intensity, read_manifest, read_nifti, read_split_file, write_nifti_u8, VolumeSlices,
};
use decornet_core::experiments::{
    probe_correlation, run_sweep, write_sweep_csv, write_sweep_json, SweepMethod, SweepPlan,
};
use decornet_core::train::{evaluate_volumes, load_checkpoint, predict_masks, train as run_training, SPLIT_FILE};
use decornet_core::{ChannelConfig, Error, Network, TrainConfig};
use ndarray::{Array2, Array3, Axis};
use serde::Serialize;

use crate::manifest::RunManifest;
use crate::{CheckpointArgs, ConfigArgs, EvalArgs, PredictArgs, ProbeArgs, SweepArgs, SynthArgs, TrainArgs};

/// Writes the manifest, runs `body`, then records the final status.
fn with_manifest(
    command: &str,
    out: &Path,
    body: impl FnOnce(&mut RunManifest) -> Result<(), Error>,
) -> Result<(), Error> {
    let mut manifest = RunManifest::start(command, out);
    manifest.write()?;
    let result = body(&mut manifest);
    let status = match &result {
        Ok(()) => "ok".to_string(),
        Err(e) => format!("failed: {e}"),
    };
    manifest.finish(&status)?;
    result
}

fn record_config(manifest: &mut RunManifest, config: &TrainConfig, path: Option<&Path>) -> Result<(), Error> {
    manifest.config_path = path.map(Path::to_path_buf);
    manifest.config_hash = Some(config.hash());
    manifest.config = Some(serde_json::to_value(config).expect("config serialises"));
    Ok(manifest.write()?)
}

fn resolve_config(args: &ConfigArgs) -> Result<TrainConfig, Error> {
    let base = match &args.config {
        Some(path) => TrainConfig::from_file(path)?,
        None => TrainConfig::default(),
    };
    let mut config = base.with_overrides(&args.overrides)?;
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    if args.deterministic {
        config.deterministic = true;
    }
    config.validate()?;
    Ok(config)
}

pub fn train(args: TrainArgs) -> Result<(), Error> {
    with_manifest("train", &args.out, |manifest| {
        let config = resolve_config(&args.config)?;
        record_config(manifest, &config, args.config.config.as_deref())?;
        let (outcome, test) = run_training(&config, &args.out)?;
        let best = &outcome.best;
        log::info!(
            "best epoch {} of {}, val dice {:.4}",
            best.epoch,
            outcome.log.len(),
            best.val_metrics.map_or(f64::NAN, |m| m.dice)
        );
        if let Some(report) = test {
            log::info!("test dice {:.4}, iou {:.4}", report.mean.dice, report.mean.iou);
        }
        Ok(())
    })
}

struct Loaded {
    network: Network,
    config: TrainConfig,
    volumes: Vec<VolumeSlices>,
}

fn split_path(args: &CheckpointArgs, config: &TrainConfig) -> Result<PathBuf, Error> {
    if let Some(p) = &args.split {
        return Ok(p.clone());
    }
    if let Some(p) = config.data.split_file.as_ref().filter(|p| p.exists()) {
        return Ok(p.clone());
    }
    let beside = args.checkpoint.parent().unwrap_or(Path::new(".")).join(SPLIT_FILE);
    if beside.exists() {
        return Ok(beside);
    }
    Err(Error::Config(format!(
        "no split file given and none found at {}",
        beside.display()
    )))
}

fn load_source(args: &CheckpointArgs, manifest: &mut RunManifest) -> Result<Loaded, Error> {
    let (network, meta) = load_checkpoint(&args.checkpoint, &Device::Cpu)?;
    let config = meta.config.with_overrides(&args.overrides)?;
    record_config(manifest, &config, None)?;
    let split = read_split_file(&split_path(args, &config)?)?;
    let manifest_path = config
        .data
        .manifest
        .as_ref()
        .ok_or_else(|| Error::Config("data.manifest is not set".into()))?;
    let entries = read_manifest(manifest_path)?;
    let ids = split.get(args.partition);
    let volumes = load_partition(&entries, ids, config.data.window)?;
    log::info!("loaded {} {} volumes", volumes.len(), args.partition);
    Ok(Loaded {
        network,
        config,
        volumes,
    })
}

pub fn eval(args: EvalArgs) -> Result<(), Error> {
    let out = args.source.out.clone();
    with_manifest("eval", &out, |manifest| {
        let loaded = load_source(&args.source, manifest)?;
        let threshold = args.threshold.unwrap_or(loaded.config.threshold);
        if !(threshold > 0.0 && threshold < 1.0) {
            return Err(Error::Config(format!("threshold must lie in (0, 1), got {threshold}")));
        }
        let report = evaluate_volumes(
            &loaded.network,
            &loaded.volumes,
            threshold,
            loaded.config.optim.batch_size,
            !loaded.config.deterministic,
        )?;
        let stem = format!("{}_metrics", args.source.partition);
        report.write_csv(&out.join(format!("{stem}.csv")))?;
        report.write_json(&out.join(format!("{stem}.json")))?;
        log::info!(
            "{} volumes: mean dice {:.4}, iou {:.4}",
            report.volumes.len(),
            report.mean.dice,
            report.mean.iou
        );
        Ok(())
    })
}

#[derive(Serialize)]
struct PredictRecord {
    input: PathBuf,
    output: PathBuf,
    shape: [usize; 3],
    foreground_voxels: usize,
}

fn mask_name(input: &Path) -> String {
    let name = input.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let stem = name
        .strip_suffix(".nii.gz")
        .or_else(|| name.strip_suffix(".nii"))
        .unwrap_or(&name);
    format!("{stem}_mask.nii.gz")
}

pub fn predict(args: PredictArgs) -> Result<(), Error> {
    with_manifest("predict", &args.out, |manifest| {
        let (network, meta) = load_checkpoint(&args.checkpoint, &Device::Cpu)?;
        let config = meta.config;
        record_config(manifest, &config, None)?;
        let threshold = args.threshold.unwrap_or(config.threshold);
        if !(threshold > 0.0 && threshold < 1.0) {
            return Err(Error::Config(format!("threshold must lie in (0, 1), got {threshold}")));
        }
        let mut records = Vec::new();
        for input in &args.volume {
            let voxels = normalize_intensity(&read_nifti(input)?, config.data.window)?;
            let slices: Vec<Array2<f32>> = voxels.outer_iter().map(|s| s.to_owned()).collect();
            let masks = predict_masks(&network, &slices, config.optim.batch_size, threshold)?;
            let views: Vec<_> = masks.iter().map(|m| m.view()).collect();
            let volume: Array3<u8> = ndarray::stack(Axis(0), &views)
                .map_err(|e| Error::Config(format!("{}: {e}", input.display())))?;
            let output = args.out.join(mask_name(input));
            write_nifti_u8(&output, volume.view(), Some(input))?;
            let (z, y, x) = volume.dim();
            let foreground_voxels = volume.iter().filter(|&&v| v == 1).count();
            log::info!("{} -> {} ({foreground_voxels} foreground voxels)", input.display(), output.display());
            records.push(PredictRecord {
                input: input.clone(),
                output,
                shape: [z, y, x],
                foreground_voxels,
            });
        }
        let text = serde_json::to_string_pretty(&records).expect("records serialise");
        std::fs::write(args.out.join("predictions.json"), text + "\n")?;
        Ok(())
    })
}

pub fn probe(args: ProbeArgs) -> Result<(), Error> {
    let out = args.source.out.clone();
    with_manifest("probe", &out, |manifest| {
        if args.layer == 0 || args.layer > decornet_core::model::DEPTH {
            return Err(Error::Config(format!(
                "probe layer {} is outside 1..={}",
                args.layer,
                decornet_core::model::DEPTH
            )));
        }
        let loaded = load_source(&args.source, manifest)?;
        let images: Vec<Array2<f32>> = loaded
            .volumes
            .iter()
            .flat_map(|v| v.slices.iter().map(|s| s.image.clone()))
            .collect();
        let result = probe_correlation(
            &loaded.network,
            &images,
            args.layer,
            loaded.config.optim.batch_size,
            loaded.config.loss.epsilon,
        )?;
        result.write_matrix_csv(&out.join(format!("probe_layer{}.csv", args.layer)))?;
        let text = serde_json::to_string_pretty(&result).expect("probe serialises");
        std::fs::write(out.join(format!("probe_layer{}.json", args.layer)), text + "\n")?;
        log::info!(
            "layer {} ({} channels, {} slices): mean diagonal mass {:.6}",
            result.layer,
            result.channels(),
            result.slices,
            result.mean_diagonal_mass
        );
        Ok(())
    })
}

fn parse_methods(list: &str) -> Result<Vec<SweepMethod>, Error> {
    list.split(',')
        .map(|m| m.trim().parse::<SweepMethod>().map_err(Error::Config))
        .collect()
}

pub fn sweep(args: SweepArgs) -> Result<(), Error> {
    with_manifest("sweep", &args.out, |manifest| {
        let config = resolve_config(&args.config)?;
        record_config(manifest, &config, args.config.config.as_deref())?;
        let channels = args
            .channels
            .iter()
            .map(|c| c.parse::<ChannelConfig>())
            .collect::<Result<Vec<_>, _>>()?;
        let plan = SweepPlan {
            base: config,
            channels,
            methods: parse_methods(&args.methods)?,
        };
        let rows = run_sweep(&plan, &args.out, args.parallel)?;
        write_sweep_csv(&rows, &args.out.join("sweep.csv"))?;
        write_sweep_json(&rows, &args.out.join("sweep.json"))?;
        for r in &rows {
            log::info!("{} {}: dice {:.4}, iou {:.4}", r.channels, r.method, r.metrics.dice, r.metrics.iou);
        }
        Ok(())
    })
}

pub fn synth(args: SynthArgs) -> Result<(), Error> {
    with_manifest("synth", &args.out, |_| {
        let corpus = SyntheticCorpus {
            volumes: args.volumes,
            slices_per_volume: args.slices,
            size: args.size,
            empty_probability: args.empty_probability,
            seed: args.seed,
        };
        let path = write_synthetic_corpus(&args.out, &corpus)?;
        log::info!("wrote {} volumes, manifest {}", corpus.volumes, path.display());
        Ok(())
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mask_names() {
        assert_eq!(mask_name(Path::new("/d/ct_01.nii.gz")), "ct_01_mask.nii.gz");
        assert_eq!(mask_name(Path::new("ct.nii")), "ct_mask.nii.gz");
    }

    #[test]
    fn method_lists() {
        assert_eq!(parse_methods("baseline, decor").unwrap(), [SweepMethod::Baseline, SweepMethod::Decor]);
        assert!(matches!(parse_methods("decor,bogus"), Err(Error::Config(_))));
    }
}
