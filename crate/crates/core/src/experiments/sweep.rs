use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::metrics::MetricSummary;
use crate::model::ChannelConfig;
use crate::train::{train, Regularizer, TrainConfig};
use crate::Error;

/// Regularisation variant trained in a sweep cell.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SweepMethod {
    /// Segmentation loss only.
    Baseline,
    Decor,
    Decov,
    Ortho,
}

impl SweepMethod {
    pub fn name(self) -> &'static str {
        match self {
            SweepMethod::Baseline => "baseline",
            SweepMethod::Decor => "decor",
            SweepMethod::Decov => "decov",
            SweepMethod::Ortho => "ortho",
        }
    }
}

impl fmt::Display for SweepMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SweepMethod {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim() {
            "baseline" | "none" => Ok(SweepMethod::Baseline),
            "decor" => Ok(SweepMethod::Decor),
            "decov" => Ok(SweepMethod::Decov),
            "ortho" => Ok(SweepMethod::Ortho),
            other => Err(format!("unknown sweep method {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepPlan {
    pub base: TrainConfig,
    pub channels: Vec<ChannelConfig>,
    pub methods: Vec<SweepMethod>,
}

impl SweepPlan {
    /// Channel configs crossed with baseline and decor training.
    pub fn with_and_without_decor(base: TrainConfig, channels: Vec<ChannelConfig>) -> Self {
        Self {
            base,
            channels,
            methods: vec![SweepMethod::Baseline, SweepMethod::Decor],
        }
    }

    /// Builds and validates every cell's config, in table order.
    pub fn cells(&self) -> Result<Vec<(ChannelConfig, SweepMethod, TrainConfig)>, Error> {
        if self.channels.len() < 2 {
            return Err(Error::Config(format!(
                "a sweep needs at least two channel configs, got {}",
                self.channels.len()
            )));
        }
        if self.methods.is_empty() {
            return Err(Error::Config("a sweep needs at least one method".into()));
        }
        if self.methods.contains(&SweepMethod::Decor) && self.base.loss.lambda_decor == 0.0 {
            return Err(Error::Config("decor runs need loss.lambda_decor > 0".into()));
        }
        if self.base.data.manifest.is_none() {
            return Err(Error::Config("data.manifest is not set".into()));
        }
        let mut cells = Vec::new();
        for &ch in &self.channels {
            for &m in &self.methods {
                let mut cfg = self.base.clone();
                cfg.model.channels = ch;
                cfg.regularizer.method = match m {
                    SweepMethod::Baseline => Regularizer::None,
                    SweepMethod::Decor => Regularizer::Decor,
                    SweepMethod::Decov => Regularizer::Decov,
                    SweepMethod::Ortho => Regularizer::Ortho,
                };
                if m == SweepMethod::Baseline {
                    cfg.loss.lambda_decor = 0.0;
                    cfg.loss.layer_lambdas = None;
                }
                cfg.validate()?;
                cells.push((ch, m, cfg));
            }
        }
        Ok(cells)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub channels: ChannelConfig,
    pub method: SweepMethod,
    pub parameters: usize,
    /// Epoch of the selected checkpoint.
    pub best_epoch: usize,
    /// Test-partition means, or validation means when there is no test set.
    pub metrics: MetricSummary,
    pub evaluated_on: String,
    pub run_dir: PathBuf,
}

/// Trains every cell of the plan under `out_dir`, one run directory each.
/// All configs are validated before the first run starts.
pub fn run_sweep(plan: &SweepPlan, out_dir: &Path, parallel: bool) -> Result<Vec<SweepRow>, Error> {
    let cells = plan.cells()?;
    std::fs::create_dir_all(out_dir)?;
    let run = |(i, (ch, m, cfg)): (usize, &(ChannelConfig, SweepMethod, TrainConfig))| -> Result<SweepRow, Error> {
        let dir = out_dir.join(format!("{i:02}_{}_{m}", ch.to_string().replace(',', "-")));
        log::info!("sweep run {i}: channels {ch}, method {m}");
        let (outcome, test) = train(cfg, &dir)?;
        let (metrics, evaluated_on) = match test {
            Some(r) => (r.mean, "test"),
            None => (outcome.best.val_metrics.expect("validation ran"), "val"),
        };
        Ok(SweepRow {
            channels: *ch,
            method: *m,
            parameters: cfg.model.parameter_count(),
            best_epoch: outcome.best.epoch,
            metrics,
            evaluated_on: evaluated_on.into(),
            run_dir: dir,
        })
    };
    if parallel {
        cells.par_iter().enumerate().map(run).collect()
    } else {
        cells.iter().enumerate().map(run).collect()
    }
}

pub fn write_sweep_csv(rows: &[SweepRow], path: &Path) -> Result<(), Error> {
    let io = |e: csv::Error| Error::Io(std::io::Error::other(e));
    let mut w = csv::Writer::from_path(path).map_err(io)?;
    w.write_record([
        "channels", "method", "decor", "parameters", "best_epoch", "dice", "iou", "precision", "recall", "evaluated_on",
    ])
    .map_err(io)?;
    for r in rows {
        w.write_record([
            r.channels.to_string(),
            r.method.to_string(),
            u8::from(r.method == SweepMethod::Decor).to_string(),
            r.parameters.to_string(),
            r.best_epoch.to_string(),
            r.metrics.dice.to_string(),
            r.metrics.iou.to_string(),
            r.metrics.precision.to_string(),
            r.metrics.recall.to_string(),
            r.evaluated_on.clone(),
        ])
        .map_err(io)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_sweep_json(rows: &[SweepRow], path: &Path) -> Result<(), Error> {
    let text = serde_json::to_string_pretty(rows).expect("rows serialise");
    std::fs::write(path, text + "\n")?;
    Ok(())
}
