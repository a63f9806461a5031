//! Detection (ACC, AUC) and fake-class localization (F1-f, IoU-f) metrics.

use std::fmt;

use crate::autograd::resize_bilinear;
use crate::error::{Error, Result};
use crate::losses::LossBundle;
use crate::mask::BinaryMask;
use crate::sample::Label;
use crate::tensor::Tensor;

/// Softmax probability of the fake class.
pub fn fake_probability(logits: [f64; 2]) -> f64 {
    1.0 / (1.0 + (logits[0] - logits[1]).exp())
}

/// Mann–Whitney AUC with ties counted as one half. `None` unless both
/// classes are present.
pub fn auc(scores: &[f64], positive: &[bool]) -> Option<f64> {
    assert_eq!(scores.len(), positive.len(), "auc: length mismatch");
    let n_pos = positive.iter().filter(|&&p| p).count();
    let n_neg = positive.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Twice the rank sum of positives, so tied average ranks stay integral.
    let mut rank2_pos: u64 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // ranks i+1..=j+1 averaged: (i + j + 2) / 2
        let avg2 = (i + j + 2) as u64;
        for &k in &order[i..=j] {
            if positive[k] {
                rank2_pos += avg2;
            }
        }
        i = j + 1;
    }
    let u2 = rank2_pos - (n_pos * (n_pos + 1)) as u64;
    Some(u2 as f64 / (2 * n_pos * n_neg) as f64)
}

/// ACC by argmax (ties go to real) and AUC on the fake probability.
pub fn detection_metrics(logits: &[[f64; 2]], labels: &[Label]) -> Result<(f64, Option<f64>)> {
    if logits.is_empty() || logits.len() != labels.len() {
        return Err(Error::shape(
            "detection_metrics",
            format!("{} predictions for {} labels", logits.len(), labels.len()),
        ));
    }
    let correct = logits
        .iter()
        .zip(labels)
        .filter(|(y, l)| (y[1] > y[0]) == l.is_manipulated())
        .count();
    let scores: Vec<f64> = logits.iter().map(|&y| fake_probability(y)).collect();
    let positive: Vec<bool> = labels.iter().map(|l| l.is_manipulated()).collect();
    Ok((correct as f64 / logits.len() as f64, auc(&scores, &positive)))
}

/// Upsamples `2×h×w` mask logits bilinearly to `height×width` and takes the
/// channel argmax (ties go to real).
pub fn binarize_mask(logits: &Tensor, height: usize, width: usize) -> BinaryMask {
    let up = resize_bilinear(logits, height, width);
    let n = height * width;
    let d = up.data();
    BinaryMask {
        height,
        width,
        data: (0..n).map(|i| u8::from(d[n + i] > d[i])).collect(),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Aggregation {
    /// Pixel counts pooled over all manipulated samples.
    #[default]
    Micro,
    /// Per-sample scores averaged.
    Macro,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Confusion {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
}

impl Confusion {
    pub fn of(pred: &BinaryMask, gt: &BinaryMask) -> Confusion {
        let mut c = Confusion::default();
        for (&p, &g) in pred.data.iter().zip(&gt.data) {
            match (p, g) {
                (1, 1) => c.tp += 1,
                (1, 0) => c.fp += 1,
                (0, 1) => c.fn_ += 1,
                _ => {}
            }
        }
        c
    }

    fn add(&mut self, o: Confusion) {
        self.tp += o.tp;
        self.fp += o.fp;
        self.fn_ += o.fn_;
    }

    pub fn f1(&self) -> f64 {
        let d = 2 * self.tp + self.fp + self.fn_;
        if d == 0 {
            0.0
        } else {
            (2 * self.tp) as f64 / d as f64
        }
    }

    pub fn iou(&self) -> f64 {
        let d = self.tp + self.fp + self.fn_;
        if d == 0 {
            0.0
        } else {
            self.tp as f64 / d as f64
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Localization {
    pub f1_f: f64,
    pub iou_f: f64,
}

/// F1/IoU of the fake class over manipulated samples only. `None` when the
/// batch has no manipulated sample.
pub fn localization_metrics(
    preds: &[BinaryMask],
    gts: &[BinaryMask],
    labels: &[Label],
    agg: Aggregation,
) -> Result<Option<Localization>> {
    if preds.len() != gts.len() || preds.len() != labels.len() {
        return Err(Error::shape(
            "localization_metrics",
            format!("{} predictions, {} masks, {} labels", preds.len(), gts.len(), labels.len()),
        ));
    }
    let mut total = Confusion::default();
    let (mut f1_sum, mut iou_sum, mut n) = (0.0, 0.0, 0usize);
    for ((p, g), l) in preds.iter().zip(gts).zip(labels) {
        if !l.is_manipulated() {
            continue;
        }
        if (p.height, p.width) != (g.height, g.width) {
            return Err(Error::shape(
                "localization_metrics",
                format!("prediction {}×{} vs mask {}×{}", p.height, p.width, g.height, g.width),
            ));
        }
        let c = Confusion::of(p, g);
        total.add(c);
        f1_sum += c.f1();
        iou_sum += c.iou();
        n += 1;
    }
    if n == 0 {
        return Ok(None);
    }
    Ok(Some(match agg {
        Aggregation::Micro => Localization {
            f1_f: total.f1(),
            iou_f: total.iou(),
        },
        Aggregation::Macro => Localization {
            f1_f: f1_sum / n as f64,
            iou_f: iou_sum / n as f64,
        },
    }))
}

/// Model outputs for one image, detached from the graph.
#[derive(Clone, Debug)]
pub struct Prediction {
    pub logits: [f64; 2],
    /// `2×h×w` mask logits at the model's output resolution.
    pub mask_logits: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub samples: usize,
    pub acc: f64,
    pub auc: Option<f64>,
    pub f1_f: Option<f64>,
    pub iou_f: Option<f64>,
    pub aggregation: Aggregation,
    pub losses: Option<LossBundle>,
}

impl MetricsReport {
    pub fn compute(
        preds: &[Prediction],
        gts: &[BinaryMask],
        labels: &[Label],
        agg: Aggregation,
        losses: Option<LossBundle>,
    ) -> Result<MetricsReport> {
        let logits: Vec<[f64; 2]> = preds.iter().map(|p| p.logits).collect();
        let (acc, auc) = detection_metrics(&logits, labels)?;
        if gts.len() != preds.len() {
            return Err(Error::shape("metrics", format!("{} predictions for {} masks", preds.len(), gts.len())));
        }
        let masks: Vec<BinaryMask> = preds
            .iter()
            .zip(gts)
            .map(|(p, g)| binarize_mask(&p.mask_logits, g.height, g.width))
            .collect();
        let loc = localization_metrics(&masks, gts, labels, agg)?;
        Ok(MetricsReport {
            samples: preds.len(),
            acc,
            auc,
            f1_f: loc.map(|l| l.f1_f),
            iou_f: loc.map(|l| l.iou_f),
            aggregation: agg,
            losses,
        })
    }
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "absent".to_string(), |x| x.to_string())
}

/// One `key=value` per line. Floats print in shortest round-trip form.
impl fmt::Display for MetricsReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "samples={}", self.samples)?;
        writeln!(f, "acc={}", self.acc)?;
        writeln!(f, "auc={}", opt(self.auc))?;
        writeln!(f, "f1_f={}", opt(self.f1_f))?;
        writeln!(f, "iou_f={}", opt(self.iou_f))?;
        let agg = match self.aggregation {
            Aggregation::Micro => "micro",
            Aggregation::Macro => "macro",
        };
        writeln!(f, "aggregation={agg}")?;
        let l = self.losses;
        writeln!(f, "loss.img={}", opt(l.map(|l| l.l_img)))?;
        writeln!(f, "loss.pix={}", opt(l.map(|l| l.l_pix)))?;
        writeln!(f, "loss.aux={}", opt(l.map(|l| l.l_aux)))?;
        writeln!(f, "loss.mone={}", opt(l.map(|l| l.l_mone)))?;
        writeln!(f, "loss.total={}", opt(l.map(|l| l.total)))
    }
}
