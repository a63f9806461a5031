//! Full detector: backbone pyramid, mixture-of-noise-experts cues and the
//! token-learning predictor.

use rand::Rng;

use crate::autograd::Var;
use crate::backbone::{Backbone, BackboneConfig, Image};
use crate::error::{Error, Result};
use crate::fup::{Fup, FupConfig, PredictorVars, DEFAULT_MASK_THRESHOLD};
use crate::losses::{total_loss, LossBundle, LossVars};
use crate::metrics::Prediction;
use crate::mone::{GateConfig, GateDecision, Mnm};
use crate::noise_experts::DEFAULT_THETA;
use crate::params::{Ctx, Init, ParamStore};
use crate::rng::stream_rng;
use crate::sample::Sample;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ModelConfig {
    pub channels: usize,
    pub depth: usize,
    pub gate: GateConfig,
    pub theta: f64,
    pub mask_threshold: f64,
    pub heads: Option<usize>,
    pub positional: bool,
    /// With `false` the noise pyramid is replaced by zeros.
    pub use_noise: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            channels: 16,
            depth: 2,
            gate: GateConfig::default(),
            theta: DEFAULT_THETA,
            mask_threshold: DEFAULT_MASK_THRESHOLD,
            heads: None,
            positional: false,
            use_noise: true,
        }
    }
}

fn invalid(name: &str, detail: String) -> Error {
    Error::InvalidParam {
        name: name.into(),
        detail,
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 {
            return Err(invalid("channels", "must be at least 1".into()));
        }
        if self.depth == 0 {
            return Err(invalid("depth", "must be at least 1".into()));
        }
        self.gate.validate()?;
        if !(0.0..=1.0).contains(&self.theta) {
            return Err(invalid("theta", format!("must lie in [0, 1], got {}", self.theta)));
        }
        if !(self.mask_threshold > 0.0 && self.mask_threshold < 1.0) {
            return Err(invalid("mask_threshold", format!("must lie in (0, 1), got {}", self.mask_threshold)));
        }
        let fup = self.fup();
        for i in 0..4 {
            let (d, h) = (fup.stage_width(i), fup.stage_heads(i));
            if h == 0 || d % h != 0 {
                return Err(invalid("heads", format!("{h} heads do not divide stage {i} width {d}")));
            }
        }
        Ok(())
    }

    pub fn backbone(&self) -> BackboneConfig {
        BackboneConfig {
            channels: self.channels,
            depth: self.depth,
        }
    }

    pub fn fup(&self) -> FupConfig {
        FupConfig {
            channels: self.channels,
            mask_threshold: self.mask_threshold,
            heads: self.heads,
            positional: self.positional,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Monfap {
    pub cfg: ModelConfig,
    pub backbone: Backbone,
    pub mnm: Mnm,
    pub fup: Fup,
}

/// Graph nodes for one batch.
#[derive(Clone, Debug)]
pub struct BatchOutput {
    pub outputs: Vec<PredictorVars>,
    pub mone_loss: Var,
    pub decisions: Vec<[GateDecision; 4]>,
}

impl Monfap {
    /// Builds the model and its parameters from `seed`.
    pub fn build(cfg: ModelConfig, seed: u64) -> Result<(Monfap, ParamStore)> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let mut init = Init::new(stream_rng(seed, "init"));
        let mut token_rng = stream_rng(seed, "tokens");
        let backbone = Backbone::new(&mut store, &mut init, cfg.backbone());
        let mnm = Mnm::new(&mut store, &mut init, cfg.channels, cfg.gate, cfg.theta);
        let fup = Fup::new(&mut store, &mut init, &mut token_rng, cfg.fup());
        Ok((Monfap { cfg, backbone, mnm, fup }, store))
    }

    pub fn forward_batch<R: Rng>(&self, ctx: &mut Ctx, images: &[Var], training: bool, rng: &mut R) -> Result<BatchOutput> {
        if images.is_empty() {
            return Err(Error::shape("forward_batch", "empty batch"));
        }
        let mut pyramids = Vec::with_capacity(images.len());
        for &img in images {
            pyramids.push(self.backbone.forward(ctx, img)?);
        }
        let (noise, mone_loss, decisions) = if self.cfg.use_noise {
            let np = self.mnm.forward(ctx, &pyramids, training, rng)?;
            let loss = np.mone_loss(ctx);
            (np.levels, loss, np.decisions)
        } else {
            let zeros = pyramids
                .iter()
                .map(|p| p.map(|v| {
                    let s = ctx.graph.shape(v).to_vec();
                    ctx.graph.constant(Tensor::zeros(&s))
                }))
                .collect();
            (zeros, ctx.graph.constant(Tensor::scalar(0.0)), Vec::new())
        };
        let mut outputs = Vec::with_capacity(images.len());
        for (pyr, r) in pyramids.iter().zip(&noise) {
            outputs.push(self.fup.forward(ctx, pyr, r)?);
        }
        Ok(BatchOutput {
            outputs,
            mone_loss,
            decisions,
        })
    }

    /// Forward pass plus the multi-task loss on `samples`.
    pub fn batch_loss<R: Rng>(
        &self,
        ctx: &mut Ctx,
        samples: &[&Sample],
        lambda: f64,
        training: bool,
        rng: &mut R,
    ) -> Result<(BatchOutput, LossVars, LossBundle)> {
        let images: Vec<Var> = samples.iter().map(|s| ctx.graph.constant(s.image.tensor().clone())).collect();
        let out = self.forward_batch(ctx, &images, training, rng)?;
        let gts: Vec<_> = samples.iter().map(|s| s.gt_mask.clone()).collect();
        let labels: Vec<_> = samples.iter().map(|s| s.label).collect();
        let (vars, bundle) = total_loss(ctx, &out.outputs, out.mone_loss, &gts, &labels, lambda)?;
        Ok((out, vars, bundle))
    }

    /// Inference on one image (no gate noise).
    pub fn predict(&self, store: &ParamStore, image: &Image) -> Result<Prediction> {
        let mut ctx = Ctx::new(store);
        let img = ctx.graph.constant(image.tensor().clone());
        // the gate draws no noise outside training, so the generator is unused
        let mut rng = stream_rng(0, "inference");
        let out = self.forward_batch(&mut ctx, &[img], false, &mut rng)?;
        let o = &out.outputs[0];
        let y = ctx.value(o.y).data();
        let logits = [y[0], y[1]];
        if !logits.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("image logits".into()));
        }
        Ok(Prediction {
            logits,
            mask_logits: ctx.value(o.m).clone(),
        })
    }

    /// Re-imposes the Bayar and high-pass kernel constraints.
    pub fn project(&self, store: &mut ParamStore) -> usize {
        self.mnm.project(store)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::check_param_gradients;
    use crate::mask::BinaryMask;
    use crate::sample::Label;

    fn small_cfg(c: usize) -> ModelConfig {
        ModelConfig {
            channels: c,
            ..ModelConfig::default()
        }
    }

    fn sample(seed: u64, size: usize, label: Label) -> Sample {
        let img = Tensor::from_fn(&[3, size, size], |i| (((i as u64 * 2654435761 + seed) % 1000) as f64) / 1000.0);
        let mut m = BinaryMask::zeros(size, size);
        if label == Label::Manipulated {
            for y in 4..size / 2 {
                for x in 8..size / 2 + 4 {
                    m.set(y, x, 1);
                }
            }
        }
        Sample::new(Image::new(img).unwrap(), m, label).unwrap()
    }

    #[test]
    fn output_shapes_at_512() {
        let (model, store) = Monfap::build(ModelConfig::default(), 3).unwrap();
        let img = Image::new(Tensor::from_fn(&[3, 512, 512], |i| ((i * 7919) % 256) as f64 / 255.0)).unwrap();
        let mut ctx = Ctx::new(&store);
        let v = ctx.graph.constant(img.tensor().clone());
        let out = model.forward_batch(&mut ctx, &[v], false, &mut stream_rng(0, "gate")).unwrap();
        let o = &out.outputs[0];
        assert_eq!(ctx.graph.shape(o.y), &[1, 2]);
        assert_eq!(ctx.graph.shape(o.m), &[2, 128, 128]);
        assert_eq!(o.strides, [32, 16, 8, 4]);
    }

    #[test]
    fn config_validation() {
        assert!(small_cfg(4).validate().is_ok());
        assert!(ModelConfig { theta: 1.5, ..small_cfg(4) }.validate().is_err());
        assert!(ModelConfig { heads: Some(3), ..small_cfg(4) }.validate().is_err());
        assert!(ModelConfig { mask_threshold: 1.0, ..small_cfg(4) }.validate().is_err());
        assert!(ModelConfig { channels: 0, ..small_cfg(4) }.validate().is_err());
    }

    #[test]
    fn build_is_deterministic() {
        let (_, a) = Monfap::build(small_cfg(4), 11).unwrap();
        let (_, b) = Monfap::build(small_cfg(4), 11).unwrap();
        let (_, c) = Monfap::build(small_cfg(4), 12).unwrap();
        let eq = |x: &ParamStore, y: &ParamStore| x.iter().zip(y.iter()).all(|((_, p), (_, q))| p.value == q.value);
        assert!(eq(&a, &b));
        assert!(!eq(&a, &c));
    }

    #[test]
    fn zeroed_noise_has_no_mone_loss() {
        let cfg = ModelConfig {
            use_noise: false,
            ..small_cfg(4)
        };
        let (model, store) = Monfap::build(cfg, 5).unwrap();
        let s = [sample(1, 32, Label::Manipulated), sample(2, 32, Label::Genuine)];
        let refs: Vec<&Sample> = s.iter().collect();
        let mut ctx = Ctx::new(&store);
        let (_, _, bundle) = model.batch_loss(&mut ctx, &refs, 10.0, true, &mut stream_rng(0, "gate")).unwrap();
        assert_eq!(bundle.l_mone, 0.0);
        assert!(bundle.is_finite());
    }

    #[test]
    fn loss_sum_identity_is_exact() {
        let (model, store) = Monfap::build(small_cfg(4), 8).unwrap();
        let s = [sample(3, 32, Label::Manipulated), sample(4, 32, Label::Genuine)];
        let refs: Vec<&Sample> = s.iter().collect();
        let mut ctx = Ctx::new(&store);
        let (_, _, b) = model.batch_loss(&mut ctx, &refs, 10.0, true, &mut stream_rng(1, "gate")).unwrap();
        assert_eq!(b.total, b.l_img + b.l_pix + b.l_aux + b.l_mone);
        assert!(b.l_mone >= 0.0 && b.l_img > 0.0 && b.l_pix > 0.0 && b.l_aux > 0.0);
    }

    #[test]
    fn end_to_end_gradients() {
        let (model, store) = Monfap::build(small_cfg(4), 21).unwrap();
        let s = [sample(5, 32, Label::Manipulated), sample(6, 32, Label::Genuine)];
        let ids: Vec<_> = store.iter().filter(|(_, p)| p.trainable).map(|(id, _)| id).collect();
        let r = check_param_gradients(&store, &ids, 1e-5, 2, |ctx| {
            let refs: Vec<&Sample> = s.iter().collect();
            let (_, vars, _) = model.batch_loss(ctx, &refs, 10.0, true, &mut stream_rng(2, "gate")).unwrap();
            vars.total
        });
        assert!(r.passes(1e-3), "{:?}", r);
    }
}
