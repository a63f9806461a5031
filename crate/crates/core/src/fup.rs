//! Forgery-aware unified predictor: four transformer stages walking the
//! pyramid from stride 32 up to stride 4, each preceded by an auxiliary
//! localizer whose binarised prediction masks the token cross-attention.
//! The final tokens yield image-level logits (mean over tokens, then an
//! MLP) and the pixel mask (token · feature dot product per position).

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autograd::{ConvSpec, Var};
use crate::error::{Error, Result};
use crate::fat::{default_heads, AttentionMask, FatLayer};
use crate::nn::{Conv2d, LayerNorm, Linear, Mlp};
use crate::params::{Ctx, Init, ParamId, ParamStore};
use crate::tensor::Tensor;

pub const DEFAULT_MASK_THRESHOLD: f64 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FupConfig {
    /// Base channel width `C` of the pyramid.
    pub channels: usize,
    pub mask_threshold: f64,
    /// Fixed head count for every stage; `None` uses [`default_heads`].
    pub heads: Option<usize>,
    pub positional: bool,
}

impl Default for FupConfig {
    fn default() -> Self {
        FupConfig {
            channels: 16,
            mask_threshold: DEFAULT_MASK_THRESHOLD,
            heads: None,
            positional: false,
        }
    }
}

impl FupConfig {
    /// Token/feature width at stage `i`: `8C / 2^i`.
    pub fn stage_width(&self, stage: usize) -> usize {
        (self.channels * 8) >> stage
    }

    pub fn stage_heads(&self, stage: usize) -> usize {
        self.heads.unwrap_or_else(|| default_heads(self.stage_width(stage)))
    }
}

/// Two learnable tokens (real, fake) of width `8C`, scaled-normal init.
pub fn init_tokens<R: Rng>(channels: usize, rng: &mut R) -> Tensor {
    let d = 8 * channels;
    Tensor::from_fn(&[2, d], |_| {
        let z: f64 = StandardNormal.sample(rng);
        z
    })
}

/// 1×1 conv to a single logit map, then `sigmoid >= threshold`.
pub fn aux_localize(ctx: &mut Ctx, head: &Conv2d, features: Var, threshold: f64) -> Result<(Var, AttentionMask)> {
    let fs = ctx.graph.shape(features).to_vec();
    let head_in = ctx.store().get(head.weight).shape()[1];
    if fs.len() != 3 || fs[0] != head_in {
        return Err(Error::shape(
            "aux_localize",
            format!("features {:?} for a head expecting {head_in} channels", fs),
        ));
    }
    let logits = head.forward(ctx, features);
    let grid = ctx
        .value(logits)
        .data()
        .iter()
        .map(|&z| (crate::autograd::sigmoid_of(z) >= threshold) as u8)
        .collect();
    let mask = AttentionMask::new(grid, fs[1], fs[2], threshold)?;
    Ok((logits, mask))
}

/// Per-sample predictor outputs as graph nodes.
/// `M(c, m, n) = <t[c], p[:, m, n]>` for tokens `2×D` and features `D×h×w`.
pub fn mask_logits(ctx: &mut Ctx, tokens: Var, features: Var) -> Var {
    let (c, h, w) = {
        let s = ctx.graph.shape(features);
        (s[0], s[1], s[2])
    };
    let flat = ctx.graph.reshape(features, &[c, h * w]);
    let m = ctx.graph.matmul(tokens, flat);
    ctx.graph.reshape(m, &[2, h, w])
}

#[derive(Clone, Debug)]
pub struct PredictorVars {
    /// Image-level logits, `1×2` (real, fake).
    pub y: Var,
    /// Pixel-level logits, `2×(H/4)×(W/4)`.
    pub m: Var,
    /// Auxiliary localizer logits per stage, `1×h_i×w_i`.
    pub aux: [Var; 4],
    /// Feature strides visited by the stages, in order.
    pub strides: [usize; 4],
    pub fallbacks: usize,
}

#[derive(Clone, Debug)]
pub struct Fup {
    pub cfg: FupConfig,
    pub tokens: ParamId,
    pub stages: Vec<FatLayer>,
    pub aux_heads: Vec<Conv2d>,
    /// `MLP_i` for stages 1..=3, halving token width.
    pub token_mlps: Vec<Linear>,
    /// `UP_i` 1×1 convs for stages 1..=3, halving channels after the 2× upsample.
    pub ups: Vec<Conv2d>,
    pub head: Mlp,
    /// Normalizes the final tokens before both heads.
    pub token_norm: LayerNorm,
}

impl Fup {
    pub fn new<R: Rng>(store: &mut ParamStore, init: &mut Init, token_rng: &mut R, cfg: FupConfig) -> Self {
        let c = cfg.channels;
        let tokens = store.add("fup.tokens", init_tokens(c, token_rng), true);
        let mut stages = Vec::with_capacity(4);
        let mut aux_heads = Vec::with_capacity(4);
        let mut token_mlps = Vec::with_capacity(3);
        let mut ups = Vec::with_capacity(3);
        for i in 0..4 {
            let d = cfg.stage_width(i);
            if i > 0 {
                token_mlps.push(Linear::new(store, init, &format!("fup.mlp{i}"), 2 * d, d));
                ups.push(Conv2d::new(store, init, &format!("fup.up{i}"), 2 * d, d, 1, ConvSpec::same(1), true));
            }
            aux_heads.push(Conv2d::new(store, init, &format!("fup.aux{i}"), d, 1, 1, ConvSpec::same(1), true));
            stages.push(FatLayer::new(store, init, &format!("fup.fat{i}"), d, cfg.stage_heads(i), cfg.positional));
        }
        let head = Mlp::new(store, init, "fup.head", (c, c, 2));
        let token_norm = LayerNorm::new(store, "fup.token_norm", c);
        Fup {
            cfg,
            tokens,
            stages,
            aux_heads,
            token_mlps,
            ups,
            head,
            token_norm,
        }
    }

    /// Runs the four stages on one sample. `pyramid` and `noise` are
    /// `[level0 .. level3]` with level 3 the coarsest.
    pub fn forward(&self, ctx: &mut Ctx, pyramid: &[Var; 4], noise: &[Var; 4]) -> Result<PredictorVars> {
        for i in 0..4 {
            if ctx.graph.shape(pyramid[i]) != ctx.graph.shape(noise[i]) {
                return Err(Error::shape(
                    "fup_forward",
                    format!(
                        "level {i}: features {:?} vs noise {:?}",
                        ctx.graph.shape(pyramid[i]),
                        ctx.graph.shape(noise[i])
                    ),
                ));
            }
            let expect = self.cfg.channels << i;
            if ctx.graph.shape(pyramid[i])[0] != expect {
                return Err(Error::shape(
                    "fup_forward",
                    format!("level {i} has {} channels, expected {expect}", ctx.graph.shape(pyramid[i])[0]),
                ));
            }
        }
        let base_h = ctx.graph.shape(pyramid[0])[1];
        let mut t = ctx.param(self.tokens);
        let mut p = ctx.graph.add(pyramid[3], noise[3]);
        let mut aux = Vec::with_capacity(4);
        let mut strides = [0; 4];
        let mut fallbacks = 0;
        for i in 0..4 {
            if i > 0 {
                t = self.token_mlps[i - 1].forward(ctx, t);
                let (h, w) = (ctx.graph.shape(p)[1], ctx.graph.shape(p)[2]);
                let up = ctx.graph.resize_bilinear(p, 2 * h, 2 * w);
                let up = self.ups[i - 1].forward(ctx, up);
                p = ctx.graph.add(up, noise[3 - i]);
            }
            strides[i] = 4 * base_h / ctx.graph.shape(p)[1];
            let (logits, mask) = aux_localize(ctx, &self.aux_heads[i], p, self.cfg.mask_threshold)?;
            aux.push(logits);
            let (t2, p2, stats) = self.stages[i].forward(ctx, t, p, &mask)?;
            fallbacks += stats.fallbacks;
            if !ctx.value(t2).all_finite() || !ctx.value(p2).all_finite() {
                return Err(Error::NonFinite(format!("predictor stage {i}")));
            }
            t = t2;
            p = p2;
        }
        let t = self.token_norm.forward(ctx, t);
        let pooled = ctx.graph.mean_rows(t);
        let y = self.head.forward(ctx, pooled);
        let m = mask_logits(ctx, t, p);
        Ok(PredictorVars {
            y,
            m,
            aux: aux.try_into().unwrap(),
            strides,
            fallbacks,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream_rng;
    use proptest::prelude::*;

    fn build(c: usize, seed: u64) -> (ParamStore, Fup) {
        let mut store = ParamStore::new();
        let mut init = Init::new(stream_rng(seed, "init"));
        let mut trng = stream_rng(seed, "tokens");
        let cfg = FupConfig {
            channels: c,
            ..FupConfig::default()
        };
        let fup = Fup::new(&mut store, &mut init, &mut trng, cfg);
        (store, fup)
    }

    fn pyramid_shapes(c: usize, h: usize, w: usize) -> [[usize; 3]; 4] {
        [0, 1, 2, 3].map(|i| [c << i, h / (4 << i), w / (4 << i)])
    }

    #[test]
    fn token_init() {
        let mut a = stream_rng(3, "tokens");
        let mut b = stream_rng(3, "tokens");
        let ta = init_tokens(16, &mut a);
        assert_eq!(ta.shape(), &[2, 128]);
        assert_eq!(ta, init_tokens(16, &mut b));
        assert_ne!(&ta.data()[..128], &ta.data()[128..]);
    }

    #[test]
    fn aux_localize_thresholds() {
        let mut store = ParamStore::new();
        let mut init = Init::new(stream_rng(1, "init"));
        let head = Conv2d::new(&mut store, &mut init, "aux", 2, 1, 1, ConvSpec::same(1), true);
        *store.get_mut(head.weight) = Tensor::zeros(&[1, 2, 1, 1]);
        for (b, expect) in [(-10.0, 0u8), (0.0, 1), (10.0, 1)] {
            *store.get_mut(head.bias.unwrap()) = Tensor::scalar(b);
            let mut ctx = Ctx::new(&store);
            let x = ctx.graph.constant(Tensor::zeros(&[2, 3, 3]));
            let (logits, mask) = aux_localize(&mut ctx, &head, x, DEFAULT_MASK_THRESHOLD).unwrap();
            assert_eq!(ctx.graph.shape(logits), &[1, 3, 3]);
            assert!(mask.grid.iter().all(|&v| v == expect), "bias {b}");
            assert_eq!(mask.threshold_used, 0.5);
        }
    }

    #[test]
    fn stage_strides_and_output_shapes() {
        let (store, fup) = build(4, 1);
        let mut init = Init::new(stream_rng(2, "x"));
        let mut ctx = Ctx::new(&store);
        let shapes = pyramid_shapes(4, 64, 96);
        let pyr = shapes.map(|s| ctx.graph.constant(init.normal(&s, 1.0)));
        let noise = shapes.map(|s| ctx.graph.constant(init.normal(&s, 0.1)));
        let out = fup.forward(&mut ctx, &pyr, &noise).unwrap();
        assert_eq!(out.strides, [32, 16, 8, 4]);
        assert_eq!(ctx.graph.shape(out.y), &[1, 2]);
        assert_eq!(ctx.graph.shape(out.m), &[2, 16, 24]);
        for (i, a) in out.aux.iter().enumerate() {
            assert_eq!(ctx.graph.shape(*a), &[1, 16 >> (3 - i), 24 >> (3 - i)]);
        }
    }

    #[test]
    fn zero_noise_keeps_shape_contract() {
        let (store, fup) = build(2, 3);
        let mut init = Init::new(stream_rng(4, "x"));
        let mut ctx = Ctx::new(&store);
        let shapes = pyramid_shapes(2, 32, 32);
        let pyr = shapes.map(|s| ctx.graph.constant(init.normal(&s, 1.0)));
        let zeros = shapes.map(|s| ctx.graph.constant(Tensor::zeros(&s)));
        let out = fup.forward(&mut ctx, &pyr, &zeros).unwrap();
        assert_eq!(ctx.graph.shape(out.m), &[2, 8, 8]);
    }

    #[test]
    fn mismatched_noise_is_rejected() {
        let (store, fup) = build(2, 5);
        let mut ctx = Ctx::new(&store);
        let shapes = pyramid_shapes(2, 32, 32);
        let pyr = shapes.map(|s| ctx.graph.constant(Tensor::zeros(&s)));
        let mut noise = pyr;
        noise[1] = ctx.graph.constant(Tensor::zeros(&[4, 2, 2]));
        assert!(fup.forward(&mut ctx, &pyr, &noise).is_err());
    }

    fn mask_of(t: &Tensor, p: &Tensor) -> Tensor {
        let store = ParamStore::new();
        let mut ctx = Ctx::new(&store);
        let (tv, pv) = (ctx.graph.constant(t.clone()), ctx.graph.constant(p.clone()));
        let m = mask_logits(&mut ctx, tv, pv);
        ctx.value(m).clone()
    }

    #[test]
    fn mask_logits_is_a_per_pixel_dot_product() {
        let mut init = Init::new(stream_rng(6, "x"));
        let t = init.normal(&[2, 5], 1.0);
        let p = init.normal(&[5, 3, 4], 1.0);
        let m = mask_of(&t, &p);
        assert_eq!(m.shape(), &[2, 3, 4]);
        for c in 0..2 {
            for y in 0..3 {
                for x in 0..4 {
                    let dot: f64 = (0..5).map(|k| t.data()[c * 5 + k] * p.at3(k, y, x)).sum();
                    assert!((m.at3(c, y, x) - dot).abs() < 1e-12);
                }
            }
        }
        assert!(mask_of(&t, &Tensor::zeros(&[5, 3, 4])).data().iter().all(|&v| v == 0.0));
        for beta in [-2.0, 0.5, 3.0] {
            let scaled = mask_of(&t, &p.scale(beta));
            assert!(scaled.max_abs_diff(&m.scale(beta)) < 1e-12);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(8))]
        #[test]
        fn token_width_tracks_feature_channels(c in 1usize..5) {
            let cfg = FupConfig { channels: c, ..FupConfig::default() };
            for i in 0..4 {
                // feature channels at stage i are those of pyramid level 3 - i
                prop_assert_eq!(cfg.stage_width(i), c << (3 - i));
            }
            let (store, fup) = build(c, c as u64);
            for (i, st) in fup.stages.iter().enumerate() {
                prop_assert_eq!(st.dim, c << (3 - i));
                prop_assert_eq!(st.dim % st.heads, 0);
            }
            prop_assert_eq!(store.get(fup.tokens).shape(), &[2, 8 * c][..]);
        }
    }
}
