use std::path::{Path, PathBuf};

use candle_core::DType;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::data::{AugmentationPolicy, IntensityWindow, REFERENCE_SPLIT};
use crate::decor::LossWeights;
use crate::model::NetworkSpec;
use crate::util::sha256_hex;
use crate::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    #[default]
    Adam,
    Sgd,
}

/// Extra decorrelation term added to the segmentation loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Regularizer {
    /// Decorrelation loss on every encoder tap, weighted by `loss.lambda_decor`.
    #[default]
    Decor,
    /// DeCov penalty on every encoder tap, weighted by `penalty_weight`.
    Decov,
    /// Kernel orthogonality on encoder convolutions, weighted by `penalty_weight`.
    Ortho,
    None,
}

/// How the decorrelation gradient reaches the network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum DecorGradient {
    /// Hand-derived gradient injected as a surrogate term.
    #[default]
    ClosedForm,
    /// Framework differentiation of the forward with `z` detached.
    Autodiff,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

impl Precision {
    pub fn dtype(self) -> DType {
        match self {
            Precision::F32 => DType::F32,
            Precision::F64 => DType::F64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RegularizerConfig {
    pub method: Regularizer,
    pub penalty_weight: f64,
    pub decor_gradient: DecorGradient,
}

impl Default for RegularizerConfig {
    fn default() -> Self {
        Self {
            method: Regularizer::Decor,
            penalty_weight: 1e-3,
            decor_gradient: DecorGradient::ClosedForm,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimConfig {
    pub optimizer: OptimizerKind,
    pub lr0: f64,
    pub epochs: usize,
    pub plateau_patience: usize,
    pub plateau_min_delta: f64,
    /// Divisor applied to the learning rate on a plateau.
    pub lr_factor: f64,
    pub batch_size: usize,
    /// Stops after this many optimizer steps when set.
    pub max_iterations: Option<usize>,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            optimizer: OptimizerKind::Adam,
            lr0: 1e-4,
            epochs: 300,
            plateau_patience: 30,
            plateau_min_delta: 5e-3,
            lr_factor: 5.0,
            batch_size: 16,
            max_iterations: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub manifest: Option<PathBuf>,
    /// Written on first use when missing.
    pub split_file: Option<PathBuf>,
    pub split_counts: [usize; 3],
    pub window: IntensityWindow,
    pub augmentation: AugmentationPolicy,
    pub keep_empty_slices: bool,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            manifest: None,
            split_file: None,
            split_counts: REFERENCE_SPLIT,
            window: IntensityWindow::default(),
            augmentation: AugmentationPolicy::default(),
            keep_empty_slices: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub model: NetworkSpec,
    pub loss: LossWeights,
    pub regularizer: RegularizerConfig,
    pub optim: OptimConfig,
    pub data: DataConfig,
    pub seed: u64,
    /// Serial evaluation and strictly ordered reductions.
    pub deterministic: bool,
    pub threshold: f64,
    pub precision: Precision,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: NetworkSpec::default(),
            loss: LossWeights::default(),
            regularizer: RegularizerConfig::default(),
            optim: OptimConfig::default(),
            data: DataConfig::default(),
            seed: 0,
            deterministic: false,
            threshold: 0.5,
            precision: Precision::F32,
        }
    }
}

impl TrainConfig {
    pub fn from_json(text: &str) -> Result<Self, Error> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self, Error> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serialises")
    }

    /// Hex SHA-256 of the compact JSON form.
    pub fn hash(&self) -> String {
        sha256_hex(serde_json::to_string(self).expect("config serialises").as_bytes())
    }

    /// Applies `key=value` overrides on dotted paths, e.g.
    /// `loss.lambda_decor=0` or `model.channels=8,8,16,16,16`.
    pub fn with_overrides<S: AsRef<str>>(&self, overrides: &[S]) -> Result<Self, Error> {
        let mut value = serde_json::to_value(self).expect("config serialises");
        for o in overrides {
            let (key, raw) = o
                .as_ref()
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override {:?} is not key=value", o.as_ref())))?;
            set_path(&mut value, key.trim(), parse_value(raw.trim()))?;
        }
        let cfg: Self = serde_json::from_value(value).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), Error> {
        let bad = |msg: String| Err(Error::Config(msg));
        self.model.validate()?;
        self.loss.validate()?;
        let o = &self.optim;
        if !(o.lr0 > 0.0 && o.lr0.is_finite()) {
            return bad(format!("optim.lr0 must be positive, got {}", o.lr0));
        }
        if o.epochs == 0 || o.plateau_patience == 0 || o.batch_size == 0 {
            return bad("optim.epochs, optim.plateau_patience and optim.batch_size must be positive".into());
        }
        if o.max_iterations == Some(0) {
            return bad("optim.max_iterations must be positive when set".into());
        }
        if !(o.plateau_min_delta >= 0.0) {
            return bad(format!("optim.plateau_min_delta must be non-negative, got {}", o.plateau_min_delta));
        }
        if !(o.lr_factor > 1.0 && o.lr_factor.is_finite()) {
            return bad(format!("optim.lr_factor must exceed 1, got {}", o.lr_factor));
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return bad(format!("threshold must lie in (0, 1), got {}", self.threshold));
        }
        if !(self.regularizer.penalty_weight >= 0.0 && self.regularizer.penalty_weight.is_finite()) {
            return bad(format!(
                "regularizer.penalty_weight must be non-negative, got {}",
                self.regularizer.penalty_weight
            ));
        }
        IntensityWindow::new(self.data.window.low, self.data.window.high)?;
        Ok(())
    }
}

/// JSON when it parses, a list when comma-separated, otherwise a string.
fn parse_value(raw: &str) -> Value {
    if let Ok(v) = serde_json::from_str::<Value>(raw) {
        return v;
    }
    if raw.contains(',') {
        return Value::Array(raw.split(',').map(|p| parse_value(p.trim())).collect());
    }
    Value::String(raw.to_string())
}

fn set_path(root: &mut Value, key: &str, value: Value) -> Result<(), Error> {
    let mut node = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        if part.is_empty() {
            return Err(Error::Config(format!("empty segment in override key {key:?}")));
        }
        let obj = match node {
            Value::Object(map) => map,
            Value::Null => {
                *node = Value::Object(Default::default());
                node.as_object_mut().expect("just created")
            }
            _ => return Err(Error::Config(format!("override key {key:?}: {part:?} is not inside an object"))),
        };
        if i + 1 == parts.len() {
            obj.insert((*part).to_string(), value);
            return Ok(());
        }
        node = obj.entry(part.to_string()).or_insert(Value::Null);
    }
    unreachable!("split yields at least one segment")
}
