//! Training loop and evaluation driver.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::losses::{total_loss, LossBundle};
use crate::metrics::{Aggregation, MetricsReport, Prediction};
use crate::model::Monfap;
use crate::optim::{poly_factor, AdamW, AdamWConfig};
use crate::params::{Ctx, ParamStore};
use crate::rng::stream_rng;
use crate::sample::Sample;
use crate::synth::perturb::{perturb, PerturbConfig};

#[derive(Clone, Debug)]
pub struct TrainOptions {
    pub iterations: usize,
    pub batch_size: usize,
    pub lambda: f64,
    pub adamw: AdamWConfig,
    pub poly_power: f64,
    pub flip: bool,
    pub seed: u64,
    pub log_every: usize,
    pub checkpoint_every: usize,
    pub checkpoint: Option<PathBuf>,
    pub log: Option<PathBuf>,
    /// Stored in every checkpoint.
    pub config_text: String,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepRecord {
    pub iter: usize,
    pub lr: f64,
    pub loss: LossBundle,
}

impl StepRecord {
    pub fn to_line(&self) -> String {
        let l = &self.loss;
        format!(
            "iter={} lr={} loss.total={} loss.img={} loss.pix={} loss.aux={} loss.mone={}",
            self.iter, self.lr, l.total, l.l_img, l.l_pix, l.l_aux, l.l_mone
        )
    }
}

#[derive(Clone, Debug, Default)]
pub struct TrainReport {
    pub steps: Vec<StepRecord>,
    /// Kernels reset by the constraint projections over the whole run.
    pub projections: usize,
}

/// One optimizer step on `batch`, followed by the kernel projections.
/// A non-finite loss or gradient leaves the parameters untouched.
pub fn train_step<R: Rng>(
    model: &Monfap,
    store: &mut ParamStore,
    opt: &mut AdamW,
    batch: &[&Sample],
    lambda: f64,
    lr: f64,
    gate_rng: &mut R,
) -> Result<(LossBundle, usize)> {
    let (bundle, grads) = {
        let mut ctx = Ctx::new(store);
        let (_, vars, bundle) = model.batch_loss(&mut ctx, batch, lambda, true, gate_rng)?;
        if !bundle.is_finite() {
            return Err(Error::NonFinite(format!("loss ({})", bundle.total)));
        }
        let mut g = ctx.graph.backward(vars.total);
        (bundle, ctx.param_grads(&mut g))
    };
    if grads.iter().flatten().any(|g| !g.all_finite()) {
        return Err(Error::NonFinite("gradients".into()));
    }
    opt.step(store, &grads, lr)?;
    Ok((bundle, model.project(store)))
}

fn augment(s: &Sample) -> Sample {
    Sample {
        image: s.image.flip_horizontal(),
        gt_mask: s.gt_mask.flip_horizontal(),
        label: s.label,
    }
}

fn append_log(path: &Path, line: &str) -> Result<()> {
    let mut f = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    writeln!(f, "{line}").map_err(|e| Error::io(path, e))
}

/// Runs `opts.iterations` steps over `samples` with reshuffling per epoch.
/// On a non-finite loss the run aborts and the last saved checkpoint is
/// left as is.
pub fn train(model: &Monfap, store: &mut ParamStore, samples: &[Sample], opts: &TrainOptions) -> Result<TrainReport> {
    if samples.is_empty() {
        return Err(Error::config("data.train", "training split is empty"));
    }
    opts.adamw.validate()?;
    let mut data_rng = stream_rng(opts.seed, "data");
    let mut aug_rng = stream_rng(opts.seed, "augment");
    let mut gate_rng = stream_rng(opts.seed, "gate");
    let mut opt = AdamW::new(opts.adamw);
    if let Some(log) = &opts.log {
        if let Some(dir) = log.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        fs::write(log, "").map_err(|e| Error::io(log, e))?;
    }
    let save = |store: &ParamStore| -> Result<()> {
        match &opts.checkpoint {
            Some(p) => Checkpoint::from_store(store, opts.config_text.clone()).save(p),
            None => Ok(()),
        }
    };
    let batch = opts.batch_size.clamp(1, samples.len());
    let mut order: Vec<usize> = Vec::new();
    let mut cursor = 0;
    let mut report = TrainReport::default();
    for iter in 0..opts.iterations {
        let mut picked = Vec::with_capacity(batch);
        while picked.len() < batch {
            if cursor == order.len() {
                order = (0..samples.len()).collect();
                order.shuffle(&mut data_rng);
                cursor = 0;
            }
            picked.push(order[cursor]);
            cursor += 1;
        }
        let owned: Vec<Sample> = picked
            .iter()
            .map(|&i| {
                let flip = aug_rng.random_bool(0.5);
                if opts.flip && flip {
                    augment(&samples[i])
                } else {
                    samples[i].clone()
                }
            })
            .collect();
        let refs: Vec<&Sample> = owned.iter().collect();
        let lr = opts.adamw.lr * poly_factor(iter, opts.iterations, opts.poly_power);
        let (loss, resets) = match train_step(model, store, &mut opt, &refs, opts.lambda, lr, &mut gate_rng) {
            Ok(r) => r,
            Err(e @ Error::NonFinite(_)) => {
                log::error!("aborting at iteration {iter}: {e}");
                return Err(e);
            }
            Err(e) => return Err(e),
        };
        report.projections += resets;
        let rec = StepRecord { iter: iter + 1, lr, loss };
        if (iter + 1) % opts.log_every.max(1) == 0 || iter + 1 == opts.iterations {
            log::info!("{}", rec.to_line());
            if let Some(log) = &opts.log {
                append_log(log, &rec.to_line())?;
            }
        }
        report.steps.push(rec);
        if (iter + 1) % opts.checkpoint_every.max(1) == 0 {
            save(store)?;
        }
    }
    save(store)?;
    Ok(report)
}

#[derive(Clone, Debug)]
pub struct EvalOptions {
    pub batch_size: usize,
    pub lambda: f64,
    pub aggregation: Aggregation,
    pub perturb: Option<PerturbConfig>,
}

/// Metrics over `samples`, optionally through the perturbation suite.
/// Loss components are the mean of per-batch losses.
pub fn evaluate(model: &Monfap, store: &ParamStore, samples: &[Sample], opts: &EvalOptions) -> Result<MetricsReport> {
    if samples.is_empty() {
        return Err(Error::config("eval.split", "evaluation split is empty"));
    }
    let mut perturb_rng = opts.perturb.as_ref().map(|p| stream_rng(p.seed, "perturb"));
    let inputs: Vec<Sample> = samples
        .iter()
        .map(|s| -> Result<Sample> {
            match (&opts.perturb, perturb_rng.as_mut()) {
                (Some(cfg), Some(rng)) => Ok(Sample {
                    image: perturb(&s.image, cfg, rng)?,
                    gt_mask: s.gt_mask.clone(),
                    label: s.label,
                }),
                _ => Ok(s.clone()),
            }
        })
        .collect::<Result<_>>()?;
    let mut preds = Vec::with_capacity(inputs.len());
    let mut sums = [0.0; 5];
    let mut batches = 0;
    let mut gate_rng = stream_rng(0, "eval");
    for chunk in inputs.chunks(opts.batch_size.max(1)) {
        let mut ctx = Ctx::new(store);
        let images: Vec<_> = chunk.iter().map(|s| ctx.graph.constant(s.image.tensor().clone())).collect();
        let out = model.forward_batch(&mut ctx, &images, false, &mut gate_rng)?;
        let gts: Vec<_> = chunk.iter().map(|s| s.gt_mask.clone()).collect();
        let labels: Vec<_> = chunk.iter().map(|s| s.label).collect();
        let (_, b) = total_loss(&mut ctx, &out.outputs, out.mone_loss, &gts, &labels, opts.lambda)?;
        for (acc, v) in sums.iter_mut().zip([b.l_img, b.l_pix, b.l_aux, b.l_mone, b.total]) {
            *acc += v;
        }
        batches += 1;
        for o in &out.outputs {
            let y = ctx.value(o.y).data();
            preds.push(Prediction {
                logits: [y[0], y[1]],
                mask_logits: ctx.value(o.m).clone(),
            });
        }
    }
    let n = batches as f64;
    let losses = LossBundle {
        l_img: sums[0] / n,
        l_pix: sums[1] / n,
        l_aux: sums[2] / n,
        l_mone: sums[3] / n,
        total: sums[4] / n,
        lambda: opts.lambda,
    };
    let gts: Vec<_> = samples.iter().map(|s| s.gt_mask.clone()).collect();
    let labels: Vec<_> = samples.iter().map(|s| s.label).collect();
    MetricsReport::compute(&preds, &gts, &labels, opts.aggregation, Some(losses))
}
