//! Residual U-Net with configurable per-level channel widths.
//!
//! Layout (five encoder units, four decoder levels):
//!
//! ```text
//! x ─ down0 (s2) ─ down1 (s2) ─ down2 (s2) ─ down3 (s2) ─ bottom (s1)
//!        │            │            │            │            │
//!       up0 ◄──────── up1 ◄─────── up2 ◄─────── up3 ◄────────┘
//! ```
//!
//! Every encoder unit is a two-convolution residual unit whose first
//! convolution is strided; its output is exposed as a tap for the
//! decorrelation loss. Each decoder level concatenates the matching tap with
//! the deeper stream, upsamples with a stride-2 transposed convolution and
//! refines with a one-convolution residual unit. The top decoder level emits
//! the segmentation logits at input resolution.

mod archive;
mod blocks;
mod params;

use std::collections::HashMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use candle_core::{DType, Device, Tensor, Var};
use candle_nn::VarMap;
use serde::{Deserialize, Serialize};

use crate::decor::FeatureMap;
use blocks::{ResidualUnit, UpLayer};
pub use archive::Archive;
pub use params::ParamStore;

/// Number of encoder units.
pub const DEPTH: usize = 5;
/// Total spatial downsampling of the encoder.
pub const DOWNSAMPLE_FACTOR: usize = 16;

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("invalid channel config: {0}")]
    InvalidChannels(String),
    #[error("invalid network spec: {0}")]
    InvalidSpec(String),
    #[error(
        "input of {height}x{width} is not divisible by {DOWNSAMPLE_FACTOR}; pad to {pad_height}x{pad_width}"
    )]
    IndivisibleInput {
        height: usize,
        width: usize,
        pad_height: usize,
        pad_width: usize,
    },
    #[error("expected input with {expected} channels, got shape {found:?}")]
    InputShape { expected: usize, found: Vec<usize> },
    #[error("checkpoint archive: {0}")]
    Archive(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Candle(#[from] candle_core::Error),
}

/// Channel width of each of the five encoder units, shallowest first.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "Vec<usize>", into = "Vec<usize>")]
pub struct ChannelConfig([usize; DEPTH]);

impl ChannelConfig {
    /// Standard Res-UNet widths.
    pub const BASELINE: ChannelConfig = ChannelConfig([32, 64, 128, 256, 512]);
    /// Widths after moving capacity from deep to shallow units.
    pub const REWEIGHTED: ChannelConfig = ChannelConfig([248, 248, 112, 112, 112]);

    pub fn new(channels: &[usize]) -> Result<Self, ModelError> {
        let arr: [usize; DEPTH] = channels.try_into().map_err(|_| {
            ModelError::InvalidChannels(format!(
                "expected {DEPTH} entries, got {}",
                channels.len()
            ))
        })?;
        if arr.contains(&0) {
            return Err(ModelError::InvalidChannels(format!(
                "channel counts must be positive: {arr:?}"
            )));
        }
        Ok(Self(arr))
    }

    pub fn channels(&self) -> &[usize; DEPTH] {
        &self.0
    }
}

impl TryFrom<Vec<usize>> for ChannelConfig {
    type Error = ModelError;
    fn try_from(v: Vec<usize>) -> Result<Self, Self::Error> {
        Self::new(&v)
    }
}

impl From<ChannelConfig> for Vec<usize> {
    fn from(c: ChannelConfig) -> Self {
        c.0.to_vec()
    }
}

impl FromStr for ChannelConfig {
    type Err = ModelError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let parsed = s
            .split(',')
            .map(|t| t.trim().parse::<usize>())
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| ModelError::InvalidChannels(format!("{s:?}: {e}")))?;
        Self::new(&parsed)
    }
}

impl fmt::Display for ChannelConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.0.iter().map(|c| c.to_string()).collect();
        f.write_str(&parts.join(","))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum BlockKind {
    #[default]
    Residual,
    /// Same units without shortcut connections.
    Plain,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkSpec {
    pub channels: ChannelConfig,
    pub in_channels: usize,
    pub out_channels: usize,
    pub block_kind: BlockKind,
}

impl Default for NetworkSpec {
    fn default() -> Self {
        Self {
            channels: ChannelConfig::REWEIGHTED,
            in_channels: 1,
            out_channels: 1,
            block_kind: BlockKind::Residual,
        }
    }
}

impl NetworkSpec {
    pub fn with_channels(channels: ChannelConfig) -> Self {
        Self {
            channels,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.in_channels == 0 || self.out_channels == 0 {
            return Err(ModelError::InvalidSpec(format!(
                "in/out channels must be positive, got {}/{}",
                self.in_channels, self.out_channels
            )));
        }
        ChannelConfig::new(self.channels.channels()).map(|_| ())
    }

    /// Trainable scalar count derived from the layer shapes, without
    /// building the network.
    pub fn parameter_count(&self) -> usize {
        let residual = self.block_kind == BlockKind::Residual;
        let conv = |i: usize, o: usize, k: usize| i * o * k * k + o;
        // conv + PReLU per subunit, shortcut conv when the shape changes
        let unit = |i: usize, o: usize, strided: bool, subunits: usize, last_conv_only: bool| {
            let mut p = 0;
            let mut c = i;
            for s in 0..subunits {
                p += conv(c, o, 3);
                if !(last_conv_only && s + 1 == subunits) {
                    p += 1;
                }
                c = o;
            }
            if residual && (strided || i != o) {
                p += conv(i, o, if strided { 3 } else { 1 });
            }
            p
        };
        let ch = self.channels.channels();
        let mut total = 0;
        let mut prev = self.in_channels;
        for &c in &ch[..DEPTH - 1] {
            total += unit(prev, c, true, 2, false);
            prev = c;
        }
        total += unit(ch[3], ch[4], false, 2, false);
        for level in 0..DEPTH - 1 {
            let (upc, outc) = up_shape(ch, level, self.out_channels);
            total += conv(upc, outc, 3) + 1;
            total += unit(outc, outc, false, 1, level == 0);
        }
        total
    }
}

/// Input and output channel counts of decoder level `level`.
fn up_shape(ch: &[usize; DEPTH], level: usize, out_channels: usize) -> (usize, usize) {
    let upc = if level == DEPTH - 2 {
        ch[level] + ch[level + 1]
    } else {
        2 * ch[level]
    };
    let outc = if level == 0 {
        out_channels
    } else {
        ch[level - 1]
    };
    (upc, outc)
}

/// Encoder outputs of a batch, one tensor per unit shaped `(B, C_l, H_l, W_l)`.
#[derive(Debug, Clone)]
pub struct EncoderTaps {
    pub taps: Vec<Tensor>,
}

impl EncoderTaps {
    pub fn shapes(&self) -> Vec<Vec<usize>> {
        self.taps.iter().map(|t| t.dims().to_vec()).collect()
    }

    pub fn batch_size(&self) -> usize {
        self.taps.first().map_or(0, |t| t.dims()[0])
    }

    /// Sample `b`'s taps as `f64` feature maps, shallowest first.
    pub fn feature_maps(&self, b: usize) -> Result<Vec<FeatureMap>, crate::Error> {
        self.taps
            .iter()
            .enumerate()
            .map(|(layer, t)| tensor_to_feature_map(&t.get(b)?, layer))
            .collect()
    }

    pub fn all_feature_maps(&self) -> Result<Vec<Vec<FeatureMap>>, crate::Error> {
        (0..self.batch_size()).map(|b| self.feature_maps(b)).collect()
    }
}

/// Converts a `(C, H, W)` tensor to a [`FeatureMap`].
pub fn tensor_to_feature_map(t: &Tensor, layer_id: usize) -> Result<FeatureMap, crate::Error> {
    let (c, h, w) = t.dims3()?;
    let values = t.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
    Ok(FeatureMap::from_vec((c, h, w), values, layer_id)?)
}

pub struct Network {
    spec: NetworkSpec,
    varmap: VarMap,
    down: Vec<ResidualUnit>,
    bottom: ResidualUnit,
    up: Vec<UpLayer>,
    dtype: DType,
    device: Device,
}

impl fmt::Debug for Network {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Network")
            .field("spec", &self.spec)
            .field("dtype", &self.dtype)
            .field("parameters", &self.parameter_count())
            .finish()
    }
}

/// Builds a freshly initialised network; initial weights depend only on `seed`.
pub fn build_network(
    spec: &NetworkSpec,
    seed: u64,
    dtype: DType,
    device: &Device,
) -> Result<Network, ModelError> {
    let mut store = ParamStore::new(seed, dtype, device.clone());
    Network::assemble(spec, &mut store)
}

/// Exact trainable scalar count of a built network.
pub fn count_parameters(network: &Network) -> usize {
    network.parameter_count()
}

impl Network {
    fn assemble(spec: &NetworkSpec, store: &mut ParamStore) -> Result<Self, ModelError> {
        spec.validate()?;
        let residual = spec.block_kind == BlockKind::Residual;
        let ch = spec.channels.channels();
        let mut down = Vec::with_capacity(DEPTH - 1);
        let mut prev = spec.in_channels;
        for (i, &c) in ch[..DEPTH - 1].iter().enumerate() {
            down.push(ResidualUnit::new(
                store,
                &format!("down.{i}"),
                prev,
                c,
                2,
                2,
                false,
                residual,
            )?);
            prev = c;
        }
        let bottom = ResidualUnit::new(store, "bottom", ch[3], ch[4], 1, 2, false, residual)?;
        let mut up = Vec::with_capacity(DEPTH - 1);
        for level in 0..DEPTH - 1 {
            let (upc, outc) = up_shape(ch, level, spec.out_channels);
            up.push(UpLayer::new(
                store,
                &format!("up.{level}"),
                upc,
                outc,
                level == 0,
                residual,
            )?);
        }
        Ok(Self {
            spec: *spec,
            varmap: store.varmap().clone(),
            down,
            bottom,
            up,
            dtype: store.dtype(),
            device: store.device().clone(),
        })
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn parameter_count(&self) -> usize {
        self.varmap.all_vars().iter().map(|v| v.elem_count()).sum()
    }

    /// Trainable variables sorted by name.
    pub fn named_vars(&self) -> Vec<(String, Var)> {
        let data = self.varmap.data().lock().expect("varmap lock poisoned");
        let mut vars: Vec<(String, Var)> = data.iter().map(|(k, v)| (k.clone(), v.clone())).collect();
        vars.sort_by(|a, b| a.0.cmp(&b.0));
        vars
    }

    pub fn vars(&self) -> Vec<Var> {
        self.named_vars().into_iter().map(|(_, v)| v).collect()
    }

    /// Convolution kernels of the encoder units' main path.
    pub fn encoder_conv_weights(&self) -> Vec<Tensor> {
        self.down
            .iter()
            .chain(std::iter::once(&self.bottom))
            .flat_map(|u| u.conv_weights())
            .collect()
    }

    /// Runs the network on `(B, in_channels, H, W)` input and returns the
    /// `(B, out_channels, H, W)` logits together with the encoder taps.
    pub fn forward_with_taps(&self, input: &Tensor) -> Result<(Tensor, EncoderTaps), ModelError> {
        let dims = input.dims();
        if dims.len() != 4 || dims[1] != self.spec.in_channels {
            return Err(ModelError::InputShape {
                expected: self.spec.in_channels,
                found: dims.to_vec(),
            });
        }
        check_divisible(dims[2], dims[3])?;
        let input = input.to_dtype(self.dtype)?;
        let mut taps = Vec::with_capacity(DEPTH);
        let mut h = input;
        for unit in &self.down {
            h = unit.forward(&h)?;
            taps.push(h.clone());
        }
        let mut y = self.bottom.forward(&h)?;
        taps.push(y.clone());
        for level in (0..DEPTH - 1).rev() {
            let joined = Tensor::cat(&[&taps[level], &y], 1)?;
            y = self.up[level].forward(&joined)?;
        }
        Ok((y, EncoderTaps { taps }))
    }

    pub fn forward(&self, input: &Tensor) -> Result<Tensor, ModelError> {
        Ok(self.forward_with_taps(input)?.0)
    }

    /// Writes weights plus string metadata into a single safetensors archive.
    pub fn save(&self, path: &Path, metadata: HashMap<String, String>) -> Result<(), ModelError> {
        archive::write(path, &self.named_vars(), metadata)
    }

    /// Rebuilds a network from an archive written by [`Network::save`].
    pub fn load(
        path: &Path,
        spec: &NetworkSpec,
        device: &Device,
    ) -> Result<(Self, HashMap<String, String>), ModelError> {
        let (tensors, metadata) = archive::read(path, device)?;
        let net = Self::from_tensors(spec, &tensors, device)?;
        Ok((net, metadata))
    }

    pub fn from_tensors(
        spec: &NetworkSpec,
        tensors: &HashMap<String, Tensor>,
        device: &Device,
    ) -> Result<Self, ModelError> {
        let dtype = tensors
            .values()
            .next()
            .map(|t| t.dtype())
            .ok_or_else(|| ModelError::Archive("archive holds no tensors".into()))?;
        let net = build_network(spec, 0, dtype, device)?;
        let vars = net.named_vars();
        if vars.len() != tensors.len() {
            return Err(ModelError::Archive(format!(
                "archive holds {} tensors, network expects {}",
                tensors.len(),
                vars.len()
            )));
        }
        for (name, var) in vars {
            let t = tensors
                .get(&name)
                .ok_or_else(|| ModelError::Archive(format!("missing tensor {name}")))?;
            if t.dims() != var.dims() {
                return Err(ModelError::Archive(format!(
                    "tensor {name} has shape {:?}, expected {:?}",
                    t.dims(),
                    var.dims()
                )));
            }
            var.set(&t.to_dtype(dtype)?)?;
        }
        Ok(net)
    }
}

/// Reads the tensors and string metadata of an archive written by
/// [`Network::save`].
pub fn read_archive(
    path: &Path,
    device: &Device,
) -> Result<Archive, ModelError> {
    archive::read(path, device)
}

pub fn check_divisible(height: usize, width: usize) -> Result<(), ModelError> {
    if height % DOWNSAMPLE_FACTOR != 0 || width % DOWNSAMPLE_FACTOR != 0 || height == 0 || width == 0
    {
        let round = |v: usize| v.div_ceil(DOWNSAMPLE_FACTOR).max(1) * DOWNSAMPLE_FACTOR;
        return Err(ModelError::IndivisibleInput {
            height,
            width,
            pad_height: round(height),
            pad_width: round(width),
        });
    }
    Ok(())
}
