use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor, Var};
use candle_nn::{AdamW, Optimizer, ParamsAdamW, SGD};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use super::checkpoint::{save_checkpoint, CheckpointMeta};
use super::config::{OptimizerKind, TrainConfig};
use super::eval::evaluate_volumes;
use super::objective::training_objective;
use super::scheduler::PlateauScheduler;
use crate::data::{
    augment, load_partition, read_manifest, read_split_file, split_dataset, training_slices, write_split_file,
    DataError, DatasetSplit, SliceSample, VolumeSlices,
};
use crate::metrics::{MetricSummary, MetricsReport};
use crate::model::{build_network, Network, DEPTH};
use crate::util::derive_seed;
use crate::Error;

pub const CONFIG_FILE: &str = "config.json";
pub const LOG_FILE: &str = "train_log.csv";
pub const BEST_CHECKPOINT: &str = "best.safetensors";
pub const LAST_CHECKPOINT: &str = "last.safetensors";
pub const SPLIT_FILE: &str = "split.txt";

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub iterations: usize,
    /// Learning rate used during the epoch.
    pub lr: f64,
    pub total: f64,
    pub ce: f64,
    pub dice: f64,
    pub reg: f64,
    pub decor: Option<f64>,
    pub decor_layers: Vec<f64>,
    pub val: MetricSummary,
    pub best: bool,
}

impl EpochRecord {
    pub fn csv_header() -> Vec<String> {
        let mut h: Vec<String> = ["epoch", "iterations", "lr", "total", "ce", "dice", "reg", "decor"]
            .map(String::from)
            .to_vec();
        h.extend((0..DEPTH).map(|l| format!("decor_l{l}")));
        h.extend(["val_dice", "val_iou", "val_precision", "val_recall", "best"].map(String::from));
        h
    }

    pub fn csv_row(&self) -> Vec<String> {
        let opt = |v: Option<f64>| v.map_or_else(String::new, |v| v.to_string());
        let mut r = vec![
            self.epoch.to_string(),
            self.iterations.to_string(),
            self.lr.to_string(),
            self.total.to_string(),
            self.ce.to_string(),
            self.dice.to_string(),
            self.reg.to_string(),
            opt(self.decor),
        ];
        r.extend((0..DEPTH).map(|l| opt(self.decor_layers.get(l).copied())));
        r.extend([self.val.dice, self.val.iou, self.val.precision, self.val.recall].map(|v| v.to_string()));
        r.push(u8::from(self.best).to_string());
        r
    }
}

#[derive(Debug)]
pub struct TrainOutcome {
    /// Network holding the best-validation weights.
    pub network: Network,
    pub best: CheckpointMeta,
    pub log: Vec<EpochRecord>,
    pub run_dir: PathBuf,
}

enum Optim {
    Adam(AdamW),
    Sgd(SGD),
}

impl Optim {
    fn new(kind: OptimizerKind, vars: Vec<Var>, lr: f64) -> Result<Self, Error> {
        Ok(match kind {
            OptimizerKind::Adam => Optim::Adam(AdamW::new(
                vars,
                ParamsAdamW {
                    lr,
                    weight_decay: 0.0,
                    ..ParamsAdamW::default()
                },
            )?),
            OptimizerKind::Sgd => Optim::Sgd(SGD::new(vars, lr)?),
        })
    }

    fn set_lr(&mut self, lr: f64) {
        match self {
            Optim::Adam(o) => o.set_learning_rate(lr),
            Optim::Sgd(o) => o.set_learning_rate(lr),
        }
    }

    fn backward_step(&mut self, loss: &Tensor) -> Result<(), Error> {
        match self {
            Optim::Adam(o) => o.backward_step(loss)?,
            Optim::Sgd(o) => o.backward_step(loss)?,
        }
        Ok(())
    }
}

/// Stacks samples into `(B, 1, H, W)` image and mask tensors.
pub fn batch_tensors(samples: &[SliceSample], dtype: DType) -> Result<(Tensor, Tensor), Error> {
    let (h, w) = samples[0].shape();
    let mut x = Vec::with_capacity(samples.len() * h * w);
    let mut y = Vec::with_capacity(samples.len() * h * w);
    for s in samples {
        x.extend(s.image.iter().copied());
        y.extend(s.mask.iter().map(|&m| f32::from(m)));
    }
    let shape = (samples.len(), 1, h, w);
    Ok((
        Tensor::from_vec(x, shape, &Device::Cpu)?.to_dtype(dtype)?,
        Tensor::from_vec(y, shape, &Device::Cpu)?.to_dtype(dtype)?,
    ))
}

type Snapshot = Vec<(String, Tensor)>;

fn snapshot(network: &Network) -> Result<Snapshot, Error> {
    network
        .named_vars()
        .into_iter()
        .map(|(n, v)| Ok((n, v.as_tensor().copy()?)))
        .collect()
}

/// Resolves the volume split: an existing split file wins, otherwise a
/// seeded split is drawn and written (to `split_file` or the run directory).
pub fn resolve_split(config: &TrainConfig, ids: &[String], run_dir: &Path) -> Result<DatasetSplit, Error> {
    if let Some(path) = &config.data.split_file {
        if path.exists() {
            return Ok(read_split_file(path)?);
        }
    }
    let split = split_dataset(ids, config.data.split_counts, config.seed)?;
    let target = config.data.split_file.clone().unwrap_or_else(|| run_dir.join(SPLIT_FILE));
    write_split_file(&target, &split)?;
    Ok(split)
}

/// Trains from the manifest named in the config, then evaluates the best
/// checkpoint on the test partition.
pub fn train(config: &TrainConfig, run_dir: &Path) -> Result<(TrainOutcome, Option<MetricsReport>), Error> {
    config.validate()?;
    std::fs::create_dir_all(run_dir)?;
    let manifest = config
        .data
        .manifest
        .as_ref()
        .ok_or_else(|| Error::Config("data.manifest is not set".into()))?;
    let entries = read_manifest(manifest)?;
    let ids: Vec<String> = entries.iter().map(|e| e.volume_id.clone()).collect();
    let split = resolve_split(config, &ids, run_dir)?;
    let train_vols = load_partition(&entries, &split.train, config.data.window)?;
    let val_vols = load_partition(&entries, &split.val, config.data.window)?;
    let slices = training_slices(&train_vols, config.data.keep_empty_slices);
    let outcome = train_on(config, &slices, &val_vols, run_dir)?;
    let test = if split.test.is_empty() {
        None
    } else {
        let test_vols = load_partition(&entries, &split.test, config.data.window)?;
        let report = evaluate_volumes(
            &outcome.network,
            &test_vols,
            config.threshold,
            config.optim.batch_size,
            !config.deterministic,
        )?;
        report.write_csv(&run_dir.join("test_metrics.csv"))?;
        report.write_json(&run_dir.join("test_metrics.json"))?;
        Some(report)
    };
    Ok((outcome, test))
}

/// Runs the epoch loop on in-memory data, writing the config snapshot, the
/// per-epoch log and best/last checkpoints into `run_dir`.
pub fn train_on(
    config: &TrainConfig,
    train_set: &[SliceSample],
    val_set: &[VolumeSlices],
    run_dir: &Path,
) -> Result<TrainOutcome, Error> {
    config.validate()?;
    if train_set.is_empty() {
        return Err(DataError::EmptyPartition("training".into()).into());
    }
    if val_set.iter().all(|v| v.slices.is_empty()) {
        return Err(DataError::EmptyPartition("validation".into()).into());
    }
    let shape = train_set[0].shape();
    if let Some(s) = train_set.iter().find(|s| s.shape() != shape) {
        return Err(DataError::ShapeMismatch {
            volume_id: s.volume_id.clone(),
            image: vec![s.shape().0, s.shape().1],
            mask: vec![shape.0, shape.1],
        }
        .into());
    }
    std::fs::create_dir_all(run_dir)?;
    std::fs::write(run_dir.join(CONFIG_FILE), config.to_json() + "\n")?;
    let config_hash = config.hash();

    let (_, adjustments) = config.data.augmentation.sanitized();
    for a in adjustments {
        log::warn!("augmentation: {a}");
    }

    let o = &config.optim;
    let dtype = config.precision.dtype();
    let network = build_network(&config.model, config.seed, dtype, &Device::Cpu)?;
    let mut optim = Optim::new(o.optimizer, network.vars(), o.lr0)?;
    let mut scheduler = PlateauScheduler::new(o.lr0, o.lr_factor, o.plateau_patience, o.plateau_min_delta);

    let mut log_writer = csv::Writer::from_writer(BufWriter::new(File::create(run_dir.join(LOG_FILE))?));
    log_writer.write_record(EpochRecord::csv_header()).map_err(csv_err)?;

    let mut records = Vec::new();
    let mut best: Option<(f64, CheckpointMeta, Snapshot)> = None;
    let mut iterations = 0usize;
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    'epochs: for epoch in 1..=o.epochs {
        let lr = scheduler.lr();
        optim.set_lr(lr);
        let seed_bytes = config.seed.to_le_bytes();
        let epoch_bytes = (epoch as u64).to_le_bytes();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[&seed_bytes, b"shuffle", &epoch_bytes]));
        order.shuffle(&mut rng);
        let policy = config
            .data
            .augmentation
            .with_seed(derive_seed(&[&seed_bytes, b"augment", &epoch_bytes]));

        let mut sums = EpochSums::default();
        let mut stop = false;
        for chunk in order.chunks(o.batch_size) {
            let samples: Vec<SliceSample> = if config.deterministic {
                chunk.iter().map(|&i| augment(&train_set[i], &policy).sample).collect()
            } else {
                chunk.par_iter().map(|&i| augment(&train_set[i], &policy).sample).collect()
            };
            let (x, y) = batch_tensors(&samples, dtype)?;
            let (logits, taps) = network.forward_with_taps(&x)?;
            let terms = training_objective(config, &network, &logits, &y, &taps)?;
            if !terms.total.is_finite() {
                return Err(Error::NonFinite(format!(
                    "epoch {epoch}, iteration {}: loss {} (ce {}, dice {}, reg {})",
                    iterations + 1,
                    terms.total,
                    terms.ce,
                    terms.dice,
                    terms.reg
                )));
            }
            optim.backward_step(&terms.graph)?;
            iterations += 1;
            sums.add(&terms);
            if o.max_iterations.is_some_and(|m| iterations >= m) {
                stop = true;
                break;
            }
        }
        let means = sums.means();
        let val = evaluate_volumes(&network, val_set, config.threshold, o.batch_size, !config.deterministic)?;
        scheduler.step(means.total)?;
        let is_best = best.as_ref().is_none_or(|(d, _, _)| val.mean.dice > *d);
        let meta = CheckpointMeta {
            spec: config.model,
            epoch,
            iterations,
            val_metrics: Some(val.mean),
            scheduler: scheduler.state(),
            config_hash: config_hash.clone(),
            config: config.clone(),
        };
        if is_best {
            save_checkpoint(&run_dir.join(BEST_CHECKPOINT), &network, &meta)?;
            val.write_json(&run_dir.join("val_metrics.json"))?;
            best = Some((val.mean.dice, meta.clone(), snapshot(&network)?));
        }
        let record = EpochRecord {
            epoch,
            iterations,
            lr,
            total: means.total,
            ce: means.ce,
            dice: means.dice,
            reg: means.reg,
            decor: means.decor,
            decor_layers: means.decor_layers,
            val: val.mean,
            best: is_best,
        };
        log::info!(
            "epoch {epoch}: loss {:.6} (ce {:.6}, dice {:.6}, reg {:.6}) lr {lr:e} val dice {:.4}{}",
            record.total,
            record.ce,
            record.dice,
            record.reg,
            record.val.dice,
            if is_best { " *" } else { "" }
        );
        log_writer.write_record(record.csv_row()).map_err(csv_err)?;
        log_writer.flush()?;
        records.push(record);
        if stop {
            save_checkpoint(&run_dir.join(LAST_CHECKPOINT), &network, &meta)?;
            break 'epochs;
        }
        if epoch == o.epochs {
            save_checkpoint(&run_dir.join(LAST_CHECKPOINT), &network, &meta)?;
        }
    }
    let (_, best_meta, weights) = best.expect("at least one epoch ran");
    let tensors = weights.into_iter().collect();
    let best_network = Network::from_tensors(&config.model, &tensors, &Device::Cpu)?;
    Ok(TrainOutcome {
        network: best_network,
        best: best_meta,
        log: records,
        run_dir: run_dir.to_path_buf(),
    })
}

fn csv_err(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e))
}

#[derive(Default)]
struct EpochSums {
    n: usize,
    total: f64,
    ce: f64,
    dice: f64,
    reg: f64,
    decor: Option<f64>,
    decor_layers: Vec<f64>,
}

impl EpochSums {
    fn add(&mut self, t: &super::objective::LossTerms) {
        self.n += 1;
        self.total += t.total;
        self.ce += t.ce;
        self.dice += t.dice;
        self.reg += t.reg;
        if let Some(d) = t.decor {
            *self.decor.get_or_insert(0.0) += d;
        }
        if self.decor_layers.len() < t.decor_layers.len() {
            self.decor_layers.resize(t.decor_layers.len(), 0.0);
        }
        for (acc, v) in self.decor_layers.iter_mut().zip(&t.decor_layers) {
            *acc += v;
        }
    }

    fn means(self) -> EpochSums {
        let n = self.n.max(1) as f64;
        EpochSums {
            n: self.n,
            total: self.total / n,
            ce: self.ce / n,
            dice: self.dice / n,
            reg: self.reg / n,
            decor: self.decor.map(|d| d / n),
            decor_layers: self.decor_layers.iter().map(|v| v / n).collect(),
        }
    }
}
