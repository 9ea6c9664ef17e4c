use candle_core::{Module, Tensor, D};
use candle_nn::{Conv2d, Conv2dConfig, ConvTranspose2d, ConvTranspose2dConfig};

use super::{ModelError, ParamStore};

const NORM_EPS: f64 = 1e-5;

pub(crate) fn conv2d(
    store: &mut ParamStore,
    name: &str,
    cin: usize,
    cout: usize,
    kernel: usize,
    stride: usize,
) -> Result<Conv2d, ModelError> {
    let bound = 1.0 / ((cin * kernel * kernel) as f64).sqrt();
    let w = store.uniform(&format!("{name}.weight"), &[cout, cin, kernel, kernel], bound)?;
    let b = store.uniform(&format!("{name}.bias"), &[cout], bound)?;
    let cfg = Conv2dConfig {
        padding: kernel / 2,
        stride,
        ..Default::default()
    };
    Ok(Conv2d::new(w, Some(b), cfg))
}

fn conv_transpose2d(
    store: &mut ParamStore,
    name: &str,
    cin: usize,
    cout: usize,
) -> Result<ConvTranspose2d, ModelError> {
    // fan-in of a transposed kernel (cin, cout, k, k) is taken over dim 1
    let bound = 1.0 / ((cout * 9) as f64).sqrt();
    let w = store.uniform(&format!("{name}.weight"), &[cin, cout, 3, 3], bound)?;
    let b = store.uniform(&format!("{name}.bias"), &[cout], bound)?;
    let cfg = ConvTranspose2dConfig {
        padding: 1,
        output_padding: 1,
        stride: 2,
        dilation: 1,
    };
    Ok(ConvTranspose2d::new(w, Some(b), cfg))
}

/// Per-sample, per-channel normalisation over the spatial dims, no affine part.
pub(crate) fn instance_norm(x: &Tensor) -> candle_core::Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    let flat = x.reshape((b, c, h * w))?;
    let centred = flat.broadcast_sub(&flat.mean_keepdim(D::Minus1)?)?;
    let var = centred.sqr()?.mean_keepdim(D::Minus1)?;
    centred
        .broadcast_div(&(var + NORM_EPS)?.sqrt()?)?
        .reshape((b, c, h, w))
}

/// PReLU with a single learned slope.
fn prelu(x: &Tensor, slope: &Tensor) -> candle_core::Result<Tensor> {
    x.relu()? - x.neg()?.relu()?.broadcast_mul(slope)?
}

/// Convolution followed by instance norm and PReLU.
struct ConvUnit {
    conv: Conv2d,
    slope: Option<Tensor>,
}

impl ConvUnit {
    fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        let y = self.conv.forward(x)?;
        match &self.slope {
            Some(slope) => prelu(&instance_norm(&y)?, slope),
            None => Ok(y),
        }
    }
}

pub(crate) struct ResidualUnit {
    units: Vec<ConvUnit>,
    shortcut: Shortcut,
}

enum Shortcut {
    None,
    Identity,
    Conv(Conv2d),
}

impl ResidualUnit {
    #[allow(clippy::too_many_arguments)]
    pub(crate) fn new(
        store: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        stride: usize,
        subunits: usize,
        last_conv_only: bool,
        residual: bool,
    ) -> Result<Self, ModelError> {
        let mut units = Vec::with_capacity(subunits);
        let mut c = cin;
        for s in 0..subunits {
            let conv = conv2d(
                store,
                &format!("{name}.conv.{s}"),
                c,
                cout,
                3,
                if s == 0 { stride } else { 1 },
            )?;
            let slope = if last_conv_only && s + 1 == subunits {
                None
            } else {
                Some(store.constant(&format!("{name}.conv.{s}.prelu"), &[1], 0.25)?)
            };
            units.push(ConvUnit { conv, slope });
            c = cout;
        }
        let shortcut = if !residual {
            Shortcut::None
        } else if stride != 1 {
            Shortcut::Conv(conv2d(store, &format!("{name}.shortcut"), cin, cout, 3, stride)?)
        } else if cin != cout {
            Shortcut::Conv(conv2d(store, &format!("{name}.shortcut"), cin, cout, 1, 1)?)
        } else {
            Shortcut::Identity
        };
        Ok(Self { units, shortcut })
    }

    pub(crate) fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        let mut y = x.clone();
        for u in &self.units {
            y = u.forward(&y)?;
        }
        match &self.shortcut {
            Shortcut::None => Ok(y),
            Shortcut::Identity => y + x,
            Shortcut::Conv(c) => y + c.forward(x)?,
        }
    }

    pub(crate) fn conv_weights(&self) -> Vec<Tensor> {
        self.units.iter().map(|u| u.conv.weight().clone()).collect()
    }
}

/// Transposed convolution (x2) with norm and PReLU, then a one-conv residual unit.
pub(crate) struct UpLayer {
    transpose: ConvTranspose2d,
    slope: Tensor,
    refine: ResidualUnit,
}

impl UpLayer {
    pub(crate) fn new(
        store: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        is_top: bool,
        residual: bool,
    ) -> Result<Self, ModelError> {
        let transpose = conv_transpose2d(store, &format!("{name}.transpose"), cin, cout)?;
        let slope = store.constant(&format!("{name}.transpose.prelu"), &[1], 0.25)?;
        let refine = ResidualUnit::new(
            store,
            &format!("{name}.refine"),
            cout,
            cout,
            1,
            1,
            is_top,
            residual,
        )?;
        Ok(Self {
            transpose,
            slope,
            refine,
        })
    }

    pub(crate) fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        let y = self.transpose.forward(x)?;
        let y = prelu(&instance_norm(&y)?, &self.slope)?;
        self.refine.forward(&y)
    }
}
