//! Multi-task loss: image cross-entropy, sample-level weighted pixel
//! cross-entropy for the final mask and the auxiliary masks, and the
//! mixture importance term.

use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::fup::PredictorVars;
use crate::mask::BinaryMask;
use crate::params::Ctx;
use crate::sample::Label;

pub const DEFAULT_LAMBDA: f64 = 10.0;

/// Two-class softmax cross-entropy of `1×2` logits.
pub fn image_loss(ctx: &mut Ctx, y: Var, label: Label) -> Var {
    let col = ctx.graph.reshape(y, &[2, 1]);
    ctx.graph.cross_entropy_cols(col, &[label.index()])
}

fn check_batch(n: usize, gts: usize, labels: usize, lambda: f64) -> Result<()> {
    if n == 0 || gts != n || labels != n {
        return Err(Error::shape(
            "pixel_loss",
            format!("{n} predictions, {gts} masks, {labels} labels"),
        ));
    }
    if !(lambda > 0.0) {
        return Err(Error::InvalidParam {
            name: "lambda".into(),
            detail: format!("must be positive, got {lambda}"),
        });
    }
    Ok(())
}

/// `CE_genuine + lambda * CE_manipulated`, each the mean over its group of
/// per-sample mean pixel losses. An empty group contributes zero.
fn weighted_groups(ctx: &mut Ctx, per_sample: Vec<Var>, labels: &[Label], lambda: f64) -> Var {
    let (mut genuine, mut manipulated) = (Vec::new(), Vec::new());
    for (v, l) in per_sample.into_iter().zip(labels) {
        match l {
            Label::Genuine => genuine.push(v),
            Label::Manipulated => manipulated.push(v),
        }
    }
    let mean = |ctx: &mut Ctx, vs: &[Var]| {
        let s = ctx.graph.sum_vars(vs);
        ctx.graph.scale(s, 1.0 / vs.len() as f64)
    };
    match (genuine.is_empty(), manipulated.is_empty()) {
        (false, false) => {
            let g = mean(ctx, &genuine);
            let m = mean(ctx, &manipulated);
            let m = ctx.graph.scale(m, lambda);
            ctx.graph.add(g, m)
        }
        (false, true) => mean(ctx, &genuine),
        (true, false) => {
            let m = mean(ctx, &manipulated);
            ctx.graph.scale(m, lambda)
        }
        (true, true) => unreachable!("batch checked non-empty"),
    }
}

/// Weighted pixel loss on `2×h×w` mask logits; `gts` must already be at
/// `h×w`.
pub fn weighted_pixel_loss(ctx: &mut Ctx, m: &[Var], gts: &[BinaryMask], labels: &[Label], lambda: f64) -> Result<Var> {
    check_batch(m.len(), gts.len(), labels.len(), lambda)?;
    let mut per_sample = Vec::with_capacity(m.len());
    for (mv, gt) in m.iter().zip(gts) {
        let s = ctx.graph.shape(*mv).to_vec();
        if s != [2, gt.height, gt.width] {
            return Err(Error::shape("pixel_loss", format!("logits {:?} vs mask {}×{}", s, gt.height, gt.width)));
        }
        let flat = ctx.graph.reshape(*mv, &[2, gt.height * gt.width]);
        per_sample.push(ctx.graph.cross_entropy_cols(flat, &gt.to_classes()));
    }
    Ok(weighted_groups(ctx, per_sample, labels, lambda))
}

/// Same weighting on single-channel `1×h×w` logits with binary cross-entropy.
pub fn weighted_binary_loss(ctx: &mut Ctx, logits: &[Var], gts: &[BinaryMask], labels: &[Label], lambda: f64) -> Result<Var> {
    check_batch(logits.len(), gts.len(), labels.len(), lambda)?;
    let mut per_sample = Vec::with_capacity(logits.len());
    for (lv, gt) in logits.iter().zip(gts) {
        let s = ctx.graph.shape(*lv).to_vec();
        if s != [1, gt.height, gt.width] {
            return Err(Error::shape("aux_loss", format!("logits {:?} vs mask {}×{}", s, gt.height, gt.width)));
        }
        per_sample.push(ctx.graph.bce_with_logits(*lv, &gt.to_f64()));
    }
    Ok(weighted_groups(ctx, per_sample, labels, lambda))
}

/// Loss terms as graph nodes.
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub l_img: Var,
    pub l_pix: Var,
    pub l_aux: Var,
    pub l_mone: Var,
    pub total: Var,
}

/// Loss terms as numbers; `total` is the left-to-right sum of the four terms.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossBundle {
    pub l_img: f64,
    pub l_pix: f64,
    pub l_aux: f64,
    pub l_mone: f64,
    pub total: f64,
    pub lambda: f64,
}

impl LossBundle {
    pub fn is_finite(&self) -> bool {
        [self.l_img, self.l_pix, self.l_aux, self.l_mone, self.total].iter().all(|v| v.is_finite())
    }
}

/// `Loss = L_img + L_pix + L_aux + L_mone` over a batch. Ground-truth
/// masks are full resolution and get nearest-downsampled to each output.
pub fn total_loss(
    ctx: &mut Ctx,
    outputs: &[PredictorVars],
    mone_loss: Var,
    gts: &[BinaryMask],
    labels: &[Label],
    lambda: f64,
) -> Result<(LossVars, LossBundle)> {
    check_batch(outputs.len(), gts.len(), labels.len(), lambda)?;
    let img_terms: Vec<Var> = outputs.iter().zip(labels).map(|(o, &l)| image_loss(ctx, o.y, l)).collect();
    let l_img = {
        let s = ctx.graph.sum_vars(&img_terms);
        ctx.graph.scale(s, 1.0 / outputs.len() as f64)
    };

    let resized = |ctx: &Ctx, v: Var, gt: &BinaryMask| {
        let s = ctx.graph.shape(v);
        gt.resize_nearest(s[1], s[2])
    };
    let m: Vec<Var> = outputs.iter().map(|o| o.m).collect();
    let gts_m: Vec<BinaryMask> = outputs.iter().zip(gts).map(|(o, gt)| resized(ctx, o.m, gt)).collect();
    let l_pix = weighted_pixel_loss(ctx, &m, &gts_m, labels, lambda)?;

    let mut stage_losses = Vec::with_capacity(4);
    for stage in 0..4 {
        let logits: Vec<Var> = outputs.iter().map(|o| o.aux[stage]).collect();
        let g: Vec<BinaryMask> = logits.iter().zip(gts).map(|(v, gt)| resized(ctx, *v, gt)).collect();
        stage_losses.push(weighted_binary_loss(ctx, &logits, &g, labels, lambda)?);
    }
    let l_aux = {
        let s = ctx.graph.sum_vars(&stage_losses);
        ctx.graph.scale(s, 0.25)
    };
    let total = ctx.graph.sum_vars(&[l_img, l_pix, l_aux, mone_loss]);
    let vars = LossVars {
        l_img,
        l_pix,
        l_aux,
        l_mone: mone_loss,
        total,
    };
    let bundle = LossBundle {
        l_img: ctx.value(l_img).item(),
        l_pix: ctx.value(l_pix).item(),
        l_aux: ctx.value(l_aux).item(),
        l_mone: ctx.value(mone_loss).item(),
        total: ctx.value(total).item(),
        lambda,
    };
    Ok((vars, bundle))
}
