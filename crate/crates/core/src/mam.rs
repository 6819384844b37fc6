//! Motor attention: a stack of temporal-only convolutions whose sigmoid
//! output gates the input feature map elementwise.

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::params::{kaiming_uniform, Bound, ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MamConfig {
    /// Number of temporal conv layers, the last one restoring `C`.
    pub layers: usize,
    /// Temporal kernel extent `N` (odd).
    pub kernel: usize,
    /// Hidden width `C'`; `None` means `C' = C`.
    pub width: Option<usize>,
    /// Per-channel kernels instead of full cross-channel mixing.
    pub depthwise: bool,
}

impl Default for MamConfig {
    fn default() -> Self {
        MamConfig {
            layers: 4,
            kernel: 3,
            width: None,
            depthwise: false,
        }
    }
}

impl MamConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 {
            return Err(Error::Config("mam.layers must be at least 1".into()));
        }
        if self.kernel % 2 == 0 {
            return Err(Error::Config(format!("mam.kernel {} must be odd", self.kernel)));
        }
        if self.width == Some(0) {
            return Err(Error::Config("mam.width must be positive".into()));
        }
        Ok(())
    }

    /// Frames of `F_in` that can influence one frame of the map: `1 + 2*L*m`.
    pub fn receptive_field(&self) -> usize {
        1 + 2 * self.layers * (self.kernel / 2)
    }
}

#[derive(Clone, Debug)]
struct Layer {
    w: ParamId,
    b: ParamId,
}

#[derive(Clone, Debug)]
pub struct MamBlock {
    channels: usize,
    depthwise: bool,
    layers: Vec<Layer>,
}

impl MamBlock {
    /// Registers `mam{stage}.conv{l}.w/.b` in `store`. Weights are
    /// Kaiming-uniform over the fan-in, biases zero.
    pub fn init(
        store: &mut ParamStore,
        stage: usize,
        channels: usize,
        cfg: &MamConfig,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        cfg.validate()?;
        let hidden = cfg.width.unwrap_or(channels);
        if cfg.depthwise && hidden != channels {
            return Err(Error::Config(format!(
                "depthwise motor attention needs width == channels ({hidden} vs {channels})"
            )));
        }
        let mut layers = Vec::with_capacity(cfg.layers);
        for l in 0..cfg.layers {
            let cin = if l == 0 { channels } else { hidden };
            let cout = if l + 1 == cfg.layers { channels } else { hidden };
            let (wdims, fan_in) = if cfg.depthwise {
                ([cout, 1, cfg.kernel], cfg.kernel)
            } else {
                ([cout, cin, cfg.kernel], cin * cfg.kernel)
            };
            let w = store.insert(
                format!("mam{stage}.conv{}.w", l + 1),
                kaiming_uniform(&wdims, fan_in, rng),
            )?;
            let b = store.insert(format!("mam{stage}.conv{}.b", l + 1), Tensor::zeros(&[cout]))?;
            layers.push(Layer { w, b });
        }
        Ok(MamBlock {
            channels,
            depthwise: cfg.depthwise,
            layers,
        })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn final_layer(&self) -> (ParamId, ParamId) {
        let last = self.layers.last().expect("at least one layer");
        (last.w, last.b)
    }

    pub fn layer_params(&self) -> impl Iterator<Item = (ParamId, ParamId)> + '_ {
        self.layers.iter().map(|l| (l.w, l.b))
    }

    /// `f_p = sigmoid(conv_L(relu(... relu(conv_1(F_in)))))` on `F_in [C, T, H, W]`.
    pub fn attention_map(&self, g: &mut Graph, p: &Bound, f_in: Var) -> Result<Var> {
        let dims = g.dims(f_in);
        if dims.len() != 4 || dims[0] != self.channels {
            return Err(Error::shape(
                "mam_forward",
                format!("input {dims:?} for a block over {} channels", self.channels),
            ));
        }
        let mut h = f_in;
        for (l, layer) in self.layers.iter().enumerate() {
            let (w, b) = (p.var(layer.w), p.var(layer.b));
            h = if self.depthwise {
                g.conv3d_temporal_depthwise(h, w, b)?
            } else {
                g.conv3d_temporal(h, w, b)?
            };
            h = if l + 1 == self.layers.len() {
                g.sigmoid(h)?
            } else {
                g.relu(h)?
            };
        }
        Ok(h)
    }

    /// Returns `(F_out, f_p)` with `F_out = f_p * F_in`.
    pub fn forward(&self, g: &mut Graph, p: &Bound, f_in: Var) -> Result<(Var, Var)> {
        let map = self.attention_map(g, p, f_in)?;
        let out = g.mul(map, f_in)?;
        Ok((out, map))
    }
}
