//! Four-level convolutional feature pyramid (strides 4, 8, 16, 32).

use crate::autograd::{ConvSpec, Var};
use crate::error::{Error, Result};
use crate::nn::{Conv2d, LayerNorm};
use crate::params::{Ctx, Init, ParamStore};
use crate::tensor::Tensor;

pub const STRIDES: [usize; 4] = [4, 8, 16, 32];

/// RGB image, `3×H×W`, values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image(Tensor);

impl Image {
    pub fn new(data: Tensor) -> Result<Self> {
        let s = data.shape();
        if s.len() != 3 || s[0] != 3 {
            return Err(Error::Dimension(format!("image must be 3×H×W, got {:?}", s)));
        }
        let (h, w) = (s[1], s[2]);
        if h < 32 || w < 32 || h % 32 != 0 || w % 32 != 0 {
            return Err(Error::Dimension(format!(
                "image height and width must be multiples of 32 and at least 32, got {h}×{w}"
            )));
        }
        if !data.all_finite() {
            return Err(Error::NonFinite("image construction".into()));
        }
        Ok(Image(data))
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor {
        self.0
    }

    pub fn height(&self) -> usize {
        self.0.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.0.shape()[2]
    }

    /// Reflect-pads a `3×h×w` tensor up to the next multiple of 32 (at least
    /// 32) on the bottom and right edges.
    pub fn reflect_padded(data: &Tensor) -> Result<Image> {
        let s = data.shape();
        if s.len() != 3 || s[0] != 3 || s[1] == 0 || s[2] == 0 {
            return Err(Error::Dimension(format!("image must be 3×H×W, got {:?}", s)));
        }
        let (h, w) = (s[1], s[2]);
        let up = |n: usize| n.div_ceil(32).max(1) * 32;
        let (ph, pw) = (up(h), up(w));
        let d = data.data();
        Image::new(Tensor::from_fn(&[3, ph, pw], |i| {
            let (c, y, x) = (i / (ph * pw), i / pw % ph, i % pw);
            d[(c * h + reflect(y, h)) * w + reflect(x, w)]
        }))
    }

    pub fn flip_horizontal(&self) -> Image {
        let w = self.width();
        let d = self.0.data();
        Image(Tensor::from_fn(self.0.shape(), |i| {
            let x = i % w;
            d[i - x + (w - 1 - x)]
        }))
    }
}

/// Index into `0..n` under mirror reflection without repeating the edge.
fn reflect(i: usize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let r = i % period;
    if r < n { r } else { period - r }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BackboneConfig {
    /// Base channel width `C`; level `i` has `C * 2^i` channels.
    pub channels: usize,
    /// Residual blocks per level.
    pub depth: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig { channels: 16, depth: 2 }
    }
}

/// Pre-activation residual block: `x + conv3x3(gelu(norm(x)))`.
#[derive(Clone, Debug)]
struct Block {
    norm: LayerNorm,
    conv: Conv2d,
}

impl Block {
    fn forward(&self, ctx: &mut Ctx, x: Var) -> Var {
        let h = self.norm.forward_channels(ctx, x);
        let h = ctx.graph.gelu(h);
        let h = self.conv.forward(ctx, h);
        ctx.graph.add(x, h)
    }
}

#[derive(Clone, Debug)]
struct Level {
    /// Stem (level 0) or stride-2 downsampling conv.
    entry: Conv2d,
    entry_norm: Option<LayerNorm>,
    blocks: Vec<Block>,
}

#[derive(Clone, Debug)]
pub struct Backbone {
    cfg: BackboneConfig,
    levels: Vec<Level>,
}

impl Backbone {
    pub fn new(store: &mut ParamStore, init: &mut Init, cfg: BackboneConfig) -> Self {
        let c = cfg.channels;
        let mut levels = Vec::with_capacity(4);
        for i in 0..4 {
            let width = c << i;
            let (entry, entry_norm) = if i == 0 {
                (
                    Conv2d::new(store, init, "backbone.stem", 3, width, 4, ConvSpec::strided(4, 0), true),
                    None,
                )
            } else {
                let prev = width / 2;
                (
                    Conv2d::new(store, init, &format!("backbone.down{i}"), prev, width, 2, ConvSpec::strided(2, 0), true),
                    Some(LayerNorm::new(store, &format!("backbone.down{i}.norm"), prev)),
                )
            };
            let blocks = (0..cfg.depth)
                .map(|b| {
                    let name = format!("backbone.level{i}.block{b}");
                    Block {
                        norm: LayerNorm::new(store, &format!("{name}.norm"), width),
                        conv: Conv2d::new(store, init, &format!("{name}.conv"), width, width, 3, ConvSpec::same(3), true),
                    }
                })
                .collect();
            levels.push(Level { entry, entry_norm, blocks });
        }
        Backbone { cfg, levels }
    }

    pub fn config(&self) -> BackboneConfig {
        self.cfg
    }

    /// Feature pyramid `[f0, f1, f2, f3]` at strides 4/8/16/32 with
    /// `C, 2C, 4C, 8C` channels.
    pub fn forward(&self, ctx: &mut Ctx, image: Var) -> Result<[Var; 4]> {
        let s = ctx.graph.shape(image).to_vec();
        if s.len() != 3 || s[0] != 3 || !s[1].is_multiple_of(32) || !s[2].is_multiple_of(32) || s[1] == 0 || s[2] == 0 {
            return Err(Error::Dimension(format!(
                "backbone input must be 3×H×W with H, W divisible by 32, got {:?}",
                s
            )));
        }
        let mut x = image;
        let mut out = Vec::with_capacity(4);
        for level in &self.levels {
            if let Some(norm) = &level.entry_norm {
                x = norm.forward_channels(ctx, x);
            }
            x = level.entry.forward(ctx, x);
            for block in &level.blocks {
                x = block.forward(ctx, x);
            }
            out.push(x);
        }
        Ok([out[0], out[1], out[2], out[3]])
    }
}
