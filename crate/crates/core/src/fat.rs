//! Forgery-aware transformer layer.
//!
//! Two tokens (row 0 = real, row 1 = fake) interact with a feature map
//! through self-attention, masked token→image cross-attention and unmasked
//! image→token cross-attention. Masking restricts the fake token to the
//! predicted forged region and the real token to its complement.

use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::nn::{map_to_rows, rows_to_map, LayerNorm, Linear, Mlp};
use crate::params::{Ctx, Init, ParamStore};
use crate::tensor::Tensor;

pub const REAL: usize = 0;
pub const FAKE: usize = 1;
pub const FFN_EXPANSION: usize = 4;
pub const REPEATS: usize = 2;

/// Head count for width `d`: 8 from 64 up, otherwise `max(1, d / 8)`.
pub fn default_heads(d: usize) -> usize {
    if d >= 64 {
        8
    } else {
        (d / 8).max(1)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TokenRole {
    Real,
    Fake,
}

/// Binary region map at a stage's feature resolution.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMask {
    pub grid: Vec<u8>,
    pub height: usize,
    pub width: usize,
    pub threshold_used: f64,
}

impl AttentionMask {
    pub fn new(grid: Vec<u8>, height: usize, width: usize, threshold_used: f64) -> Result<Self> {
        if grid.len() != height * width || grid.iter().any(|&v| v > 1) {
            return Err(Error::shape(
                "attention_mask",
                format!("grid of {} binary values expected for {height}×{width}", height * width),
            ));
        }
        Ok(AttentionMask {
            grid,
            height,
            width,
            threshold_used,
        })
    }

    pub fn filled(height: usize, width: usize, value: u8) -> Self {
        AttentionMask {
            grid: vec![value; height * width],
            height,
            width,
            threshold_used: 0.5,
        }
    }

    pub fn complement(&self) -> Self {
        AttentionMask {
            grid: self.grid.iter().map(|v| 1 - v).collect(),
            ..self.clone()
        }
    }
}

/// Additive attention bias for one token over the `h·w` positions.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionBias {
    pub values: Vec<f64>,
    /// True when the token's admissible region was empty and the bias fell
    /// back to all zeros.
    pub fallback: bool,
}

/// `0` where the token may attend, `-inf` elsewhere. The fake token may
/// attend where the grid is 1, the real token where it is 0.
pub fn build_attention_bias(mask: &AttentionMask, role: TokenRole) -> AttentionBias {
    let admit = match role {
        TokenRole::Fake => 1,
        TokenRole::Real => 0,
    };
    if !mask.grid.contains(&admit) {
        return AttentionBias {
            values: vec![0.0; mask.grid.len()],
            fallback: true,
        };
    }
    AttentionBias {
        values: mask
            .grid
            .iter()
            .map(|&v| if v == admit { 0.0 } else { f64::NEG_INFINITY })
            .collect(),
        fallback: false,
    }
}

/// Bias rows for the (real, fake) token pair as a `2×hw` tensor.
pub fn token_pair_bias(mask: &AttentionMask) -> (Tensor, usize) {
    let real = build_attention_bias(mask, TokenRole::Real);
    let fake = build_attention_bias(mask, TokenRole::Fake);
    let fallbacks = real.fallback as usize + fake.fallback as usize;
    let mut values = real.values;
    values.extend(fake.values);
    let n = mask.grid.len();
    (Tensor::from_vec(&[2, n], values).unwrap(), fallbacks)
}

/// Multi-head attention projections.
#[derive(Clone, Debug)]
pub struct Attention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
}

/// Attention result with the per-head weight matrices kept for inspection.
pub struct AttentionOutput {
    pub out: Var,
    pub weights: Vec<Var>,
}

impl Attention {
    pub fn new(store: &mut ParamStore, init: &mut Init, name: &str, dim: usize, heads: usize) -> Self {
        Attention {
            q: Linear::new(store, init, &format!("{name}.q"), dim, dim),
            k: Linear::new(store, init, &format!("{name}.k"), dim, dim),
            v: Linear::new(store, init, &format!("{name}.v"), dim, dim),
            o: Linear::new(store, init, &format!("{name}.o"), dim, dim),
            heads,
        }
    }

    /// `softmax(bias + q k^T / sqrt(d_head)) v` per head, then the output
    /// projection. `queries` is `n×D`, `keys_values` is `m×D`, `bias` is
    /// `n×m`.
    pub fn forward(&self, ctx: &mut Ctx, queries: Var, keys_values: Var, bias: Option<&Tensor>) -> Result<AttentionOutput> {
        let d = ctx.graph.shape(queries)[1];
        if ctx.graph.shape(keys_values)[1] != d || d != self.q.in_dim {
            return Err(Error::shape(
                "attention",
                format!(
                    "query width {d}, key/value width {}, projection width {}",
                    ctx.graph.shape(keys_values)[1],
                    self.q.in_dim
                ),
            ));
        }
        let (n, m) = (ctx.graph.shape(queries)[0], ctx.graph.shape(keys_values)[0]);
        if let Some(b) = bias {
            if b.shape() != [n, m] {
                return Err(Error::shape("attention", format!("bias {:?} for {n}×{m} scores", b.shape())));
            }
        }
        let q = self.q.forward(ctx, queries);
        let k = self.k.forward(ctx, keys_values);
        let v = self.v.forward(ctx, keys_values);
        let dh = d / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut outs = Vec::with_capacity(self.heads);
        let mut weights = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (qh, kh, vh) = if self.heads == 1 {
                (q, k, v)
            } else {
                (
                    ctx.graph.slice_cols(q, h * dh, (h + 1) * dh),
                    ctx.graph.slice_cols(k, h * dh, (h + 1) * dh),
                    ctx.graph.slice_cols(v, h * dh, (h + 1) * dh),
                )
            };
            let scores = ctx.graph.matmul_t(qh, kh, false, true);
            let scores = ctx.graph.scale(scores, scale);
            let scores = match bias {
                Some(b) => ctx.graph.add_const(scores, b),
                None => scores,
            };
            let w = ctx.graph.softmax_rows(scores);
            weights.push(w);
            outs.push(ctx.graph.matmul(w, vh));
        }
        let merged = if outs.len() == 1 { outs[0] } else { ctx.graph.concat_cols(&outs) };
        let out = self.o.forward(ctx, merged);
        if !ctx.value(out).all_finite() {
            return Err(Error::NonFinite("attention".into()));
        }
        Ok(AttentionOutput { out, weights })
    }
}

/// Masked cross-attention of the token pair over flattened features.
pub fn masked_attention(ctx: &mut Ctx, attn: &Attention, tokens: Var, features_rows: Var, mask: &AttentionMask) -> Result<AttentionOutput> {
    let (bias, _) = token_pair_bias(mask);
    attn.forward(ctx, tokens, features_rows, Some(&bias))
}

#[derive(Clone, Debug)]
struct Repeat {
    norm_self: LayerNorm,
    self_attn: Attention,
    norm_t2i_q: LayerNorm,
    norm_t2i_kv: LayerNorm,
    t2i_attn: Attention,
    norm_ffn_t: LayerNorm,
    ffn_t: Mlp,
    norm_i2t_q: LayerNorm,
    norm_i2t_kv: LayerNorm,
    i2t_attn: Attention,
    norm_ffn_p: LayerNorm,
    ffn_p: Mlp,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct FatStats {
    /// Masked attention calls that fell back to unmasked attention because
    /// a token's region was empty.
    pub fallbacks: usize,
}

#[derive(Clone, Debug)]
pub struct FatLayer {
    repeats: Vec<Repeat>,
    final_norm_q: LayerNorm,
    final_norm_kv: LayerNorm,
    final_attn: Attention,
    pub dim: usize,
    pub heads: usize,
    pub positional: bool,
}

impl FatLayer {
    pub fn new(store: &mut ParamStore, init: &mut Init, name: &str, dim: usize, heads: usize, positional: bool) -> Self {
        let repeats = (0..REPEATS)
            .map(|r| {
                let p = format!("{name}.rep{r}");
                Repeat {
                    norm_self: LayerNorm::new(store, &format!("{p}.norm_self"), dim),
                    self_attn: Attention::new(store, init, &format!("{p}.self_attn"), dim, heads),
                    norm_t2i_q: LayerNorm::new(store, &format!("{p}.norm_t2i_q"), dim),
                    norm_t2i_kv: LayerNorm::new(store, &format!("{p}.norm_t2i_kv"), dim),
                    t2i_attn: Attention::new(store, init, &format!("{p}.t2i_attn"), dim, heads),
                    norm_ffn_t: LayerNorm::new(store, &format!("{p}.norm_ffn_t"), dim),
                    ffn_t: Mlp::new(store, init, &format!("{p}.ffn_t"), (dim, dim * FFN_EXPANSION, dim)),
                    norm_i2t_q: LayerNorm::new(store, &format!("{p}.norm_i2t_q"), dim),
                    norm_i2t_kv: LayerNorm::new(store, &format!("{p}.norm_i2t_kv"), dim),
                    i2t_attn: Attention::new(store, init, &format!("{p}.i2t_attn"), dim, heads),
                    norm_ffn_p: LayerNorm::new(store, &format!("{p}.norm_ffn_p"), dim),
                    ffn_p: Mlp::new(store, init, &format!("{p}.ffn_p"), (dim, dim * FFN_EXPANSION, dim)),
                }
            })
            .collect();
        FatLayer {
            repeats,
            final_norm_q: LayerNorm::new(store, &format!("{name}.final_norm_q"), dim),
            final_norm_kv: LayerNorm::new(store, &format!("{name}.final_norm_kv"), dim),
            final_attn: Attention::new(store, init, &format!("{name}.final_attn"), dim, heads),
            dim,
            heads,
            positional,
        }
    }

    /// Every attention and feed-forward parameter of the layer (norms
    /// excluded), for tests that zero or inspect them.
    pub fn projection_params(&self) -> Vec<crate::params::ParamId> {
        let mut ids = Vec::new();
        let attn = |a: &Attention, ids: &mut Vec<_>| {
            for l in [&a.q, &a.k, &a.v, &a.o] {
                ids.push(l.weight);
                ids.push(l.bias);
            }
        };
        for r in &self.repeats {
            attn(&r.self_attn, &mut ids);
            attn(&r.t2i_attn, &mut ids);
            attn(&r.i2t_attn, &mut ids);
            for l in [&r.ffn_t.fc1, &r.ffn_t.fc2, &r.ffn_p.fc1, &r.ffn_p.fc2] {
                ids.push(l.weight);
                ids.push(l.bias);
            }
        }
        attn(&self.final_attn, &mut ids);
        ids
    }

    /// Updates `(tokens 2×D, features D×h×w)` under `mask`.
    pub fn forward(&self, ctx: &mut Ctx, tokens: Var, features: Var, mask: &AttentionMask) -> Result<(Var, Var, FatStats)> {
        let ts = ctx.graph.shape(tokens).to_vec();
        let fs = ctx.graph.shape(features).to_vec();
        if ts != [2, self.dim] || fs.len() != 3 || fs[0] != self.dim {
            return Err(Error::shape(
                "fat_layer",
                format!("tokens {:?} and features {:?} for width {}", ts, fs, self.dim),
            ));
        }
        let (h, w) = (fs[1], fs[2]);
        if mask.height != h || mask.width != w {
            return Err(Error::shape(
                "fat_layer",
                format!("mask {}×{} for features {h}×{w}", mask.height, mask.width),
            ));
        }
        let (bias, fallbacks) = token_pair_bias(mask);
        if fallbacks > 0 {
            log::debug!("fat_layer: {fallbacks} token(s) with empty region, attending unmasked");
        }
        let mut stats = FatStats::default();
        let mut t = tokens;
        let mut p = map_to_rows(ctx, features);
        let pe = self.positional.then(|| sine_positions(h, w, self.dim));
        let with_pe = |ctx: &mut Ctx, x: Var| match &pe {
            Some(pe) => ctx.graph.add_const(x, pe),
            None => x,
        };
        for r in &self.repeats {
            let tn = r.norm_self.forward(ctx, t);
            let a = r.self_attn.forward(ctx, tn, tn, None)?;
            t = ctx.graph.add(t, a.out);

            let tn = r.norm_t2i_q.forward(ctx, t);
            let kv = r.norm_t2i_kv.forward(ctx, p);
            let kv = with_pe(ctx, kv);
            let a = r.t2i_attn.forward(ctx, tn, kv, Some(&bias))?;
            stats.fallbacks += fallbacks;
            t = ctx.graph.add(t, a.out);

            let tn = r.norm_ffn_t.forward(ctx, t);
            let f = r.ffn_t.forward(ctx, tn);
            t = ctx.graph.add(t, f);

            let pn = r.norm_i2t_q.forward(ctx, p);
            let pn = with_pe(ctx, pn);
            let tk = r.norm_i2t_kv.forward(ctx, t);
            let a = r.i2t_attn.forward(ctx, pn, tk, None)?;
            p = ctx.graph.add(p, a.out);

            let pn = r.norm_ffn_p.forward(ctx, p);
            let f = r.ffn_p.forward(ctx, pn);
            p = ctx.graph.add(p, f);
        }
        let tn = self.final_norm_q.forward(ctx, t);
        let kv = self.final_norm_kv.forward(ctx, p);
        let kv = with_pe(ctx, kv);
        let a = self.final_attn.forward(ctx, tn, kv, Some(&bias))?;
        stats.fallbacks += fallbacks;
        t = ctx.graph.add(t, a.out);
        let features = rows_to_map(ctx, p, h, w);
        Ok((t, features, stats))
    }
}

/// Fixed 2-D sinusoidal position table, `hw×d`: the first half of the
/// channels encodes rows, the second half columns.
pub fn sine_positions(h: usize, w: usize, d: usize) -> Tensor {
    let half = (d / 2).max(1);
    Tensor::from_fn(&[h * w, d], |i| {
        let (pos, c) = (i / d, i % d);
        let (coord, c) = if c < half { (pos / w, c) } else { (pos % w, c - half) };
        let freq = 1.0 / 10000f64.powf((2 * (c / 2)) as f64 / half as f64);
        let a = coord as f64 * freq;
        if c % 2 == 0 {
            a.sin()
        } else {
            a.cos()
        }
    })
}
