//! Mixture of noise extractors: noisy top-k gating over the four noise
//! experts plus an always-on shared convolution, the importance loss that
//! balances expert usage, and the four-level wrapper that turns a feature
//! pyramid into a noise pyramid.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::autograd::{ConvSpec, Var};
use crate::error::{Error, Result};
use crate::nn::{Conv2d, Linear};
use crate::noise_experts::{ExpertKind, NoiseExpert};
use crate::params::{Ctx, Init, ParamStore};
use crate::tensor::Tensor;

pub const NUM_EXPERTS: usize = 4;
pub const DEFAULT_TOP_K: usize = 4;
pub const DEFAULT_W_IM: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GateConfig {
    pub k: usize,
    pub w_im: f64,
}

impl Default for GateConfig {
    fn default() -> Self {
        GateConfig {
            k: DEFAULT_TOP_K,
            w_im: DEFAULT_W_IM,
        }
    }
}

impl GateConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k < 1 || self.k > NUM_EXPERTS {
            return Err(Error::InvalidParam {
                name: "k".into(),
                detail: format!("top-k must lie in [1, {NUM_EXPERTS}], got {}", self.k),
            });
        }
        if !(self.w_im >= 0.0) || !self.w_im.is_finite() {
            return Err(Error::InvalidParam {
                name: "w_im".into(),
                detail: format!("must be a finite non-negative number, got {}", self.w_im),
            });
        }
        Ok(())
    }
}

/// Per-sample routing decision.
#[derive(Clone, Debug, PartialEq)]
pub struct GateDecision {
    /// Expert weights; zero outside the top-k, summing to one inside it.
    pub weights: [f64; NUM_EXPERTS],
    /// Pre-selection logits `H(x)` (noise included when training).
    pub logits: [f64; NUM_EXPERTS],
    /// Standard-normal draws used for the noise term (zero at evaluation).
    pub noise_draw: [f64; NUM_EXPERTS],
}

impl GateDecision {
    pub fn active(&self) -> impl Iterator<Item = usize> + '_ {
        (0..NUM_EXPERTS).filter(|&n| self.weights[n] != 0.0)
    }
}

/// Indices kept by top-k selection. Ties resolve to the lower index.
pub fn top_k_indices(logits: &[f64], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..logits.len()).collect();
    order.sort_by(|&a, &b| logits[b].total_cmp(&logits[a]).then(a.cmp(&b)));
    order.truncate(k);
    order.sort_unstable();
    order
}

/// Additive mask: `0` on the top-k entries, `-inf` elsewhere.
pub fn top_k_mask(logits: &[f64], k: usize) -> Vec<f64> {
    let keep = top_k_indices(logits, k);
    (0..logits.len())
        .map(|i| if keep.contains(&i) { 0.0 } else { f64::NEG_INFINITY })
        .collect()
}

/// Gate output: the decision plus the differentiable weight row (`1×4`).
#[derive(Clone, Debug)]
pub struct GateOutput {
    pub decision: GateDecision,
    pub weights: Var,
}

#[derive(Clone, Debug)]
pub struct Gate {
    pub f_g: Linear,
    pub f_noise: Linear,
    pub k: usize,
}

impl Gate {
    /// Both projections start at zero, so an untrained gate is uniform.
    pub fn new(store: &mut ParamStore, name: &str, channels: usize, k: usize) -> Self {
        Gate {
            f_g: Linear::zeros(store, &format!("{name}.f_g"), channels, NUM_EXPERTS),
            f_noise: Linear::zeros(store, &format!("{name}.f_noise"), channels, NUM_EXPERTS),
            k,
        }
    }

    /// `H = F_g(avg x) + SN * softplus(F_noise(avg x))` when training,
    /// `H = F_g(avg x)` otherwise; weights are `softmax(topk(H, k))`.
    pub fn forward<R: Rng>(&self, ctx: &mut Ctx, fmap: Var, training: bool, rng: &mut R) -> Result<GateOutput> {
        if self.k < 1 || self.k > NUM_EXPERTS {
            return Err(Error::InvalidParam {
                name: "k".into(),
                detail: format!("top-k must lie in [1, {NUM_EXPERTS}], got {}", self.k),
            });
        }
        let ch = ctx.graph.shape(fmap)[0];
        if ch != self.f_g.in_dim {
            return Err(Error::shape(
                "gate",
                format!("feature map has {ch} channels, gate expects {}", self.f_g.in_dim),
            ));
        }
        let pooled = ctx.graph.global_avg_pool(fmap);
        let x_g = self.f_g.forward(ctx, pooled);
        let mut noise_draw = [0.0; NUM_EXPERTS];
        let h = if training {
            for v in noise_draw.iter_mut() {
                *v = rng.sample(StandardNormal);
            }
            let x_noise = self.f_noise.forward(ctx, pooled);
            let sp = ctx.graph.softplus(x_noise);
            let noise = Tensor::from_vec(&[1, NUM_EXPERTS], noise_draw.to_vec()).unwrap();
            let scaled = ctx.graph.mul_const(sp, &noise);
            ctx.graph.add(x_g, scaled)
        } else {
            x_g
        };
        let logits: [f64; NUM_EXPERTS] = ctx.value(h).data().try_into().unwrap();
        let mask = Tensor::from_vec(&[1, NUM_EXPERTS], top_k_mask(&logits, self.k)).unwrap();
        let masked = ctx.graph.add_const(h, &mask);
        let weights = ctx.graph.softmax_rows(masked);
        let decision = GateDecision {
            weights: ctx.value(weights).data().try_into().unwrap(),
            logits,
            noise_draw,
        };
        Ok(GateOutput { decision, weights })
    }
}

/// One mixture block: four routed noise experts and one shared expert.
#[derive(Clone, Debug)]
pub struct Mone {
    pub experts: [NoiseExpert; NUM_EXPERTS],
    pub shared: Conv2d,
    pub gate: Gate,
    pub channels: usize,
}

impl Mone {
    pub fn new(store: &mut ParamStore, init: &mut Init, name: &str, channels: usize, gate: GateConfig, theta: f64) -> Self {
        let experts = ExpertKind::ALL.map(|kind| NoiseExpert::new(store, init, name, kind, channels, theta));
        let shared = Conv2d::new(store, init, &format!("{name}.shared"), channels, channels, 3, ConvSpec::same(3), true);
        Mone {
            experts,
            shared,
            gate: Gate::new(store, &format!("{name}.gate"), channels, gate.k),
            channels,
        }
    }

    /// `y = sum_n G_n(x) NE_n(x) + SE(x)`. Experts with zero weight are not
    /// evaluated.
    pub fn forward<R: Rng>(&self, ctx: &mut Ctx, x: Var, training: bool, rng: &mut R) -> Result<(Var, GateOutput)> {
        let gate = self.gate.forward(ctx, x, training, rng)?;
        let mut terms = Vec::with_capacity(NUM_EXPERTS + 1);
        for n in gate.decision.active().collect::<Vec<_>>() {
            let e = self.experts[n].forward(ctx, x)?;
            terms.push(ctx.graph.mul_scalar_at(e, gate.weights, n));
        }
        terms.push(self.shared.forward(ctx, x));
        Ok((ctx.graph.sum_vars(&terms), gate))
    }

    pub fn project(&self, store: &mut ParamStore) -> usize {
        self.experts.iter().map(|e| e.project(store)).sum()
    }
}

/// `w_im * CV(sum_x G(x))^2` with the population standard deviation, from
/// recorded decisions. Zero when the summed importance has zero mean.
pub fn importance_loss(decisions: &[GateDecision], w_im: f64) -> Result<f64> {
    if decisions.is_empty() {
        return Err(Error::InvalidParam {
            name: "decisions".into(),
            detail: "importance loss needs a non-empty batch".into(),
        });
    }
    let mut importance = [0.0; NUM_EXPERTS];
    for d in decisions {
        for (acc, w) in importance.iter_mut().zip(d.weights) {
            *acc += w;
        }
    }
    Ok(w_im * cv_squared(&importance))
}

pub(crate) fn cv_squared(v: &[f64]) -> f64 {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if mean == 0.0 {
        return 0.0;
    }
    let var = v.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / n;
    var / (mean * mean)
}

/// Differentiable importance loss over the gate weight rows of one batch.
pub fn importance_loss_var(ctx: &mut Ctx, gate_weights: &[Var], w_im: f64) -> Result<Var> {
    if gate_weights.is_empty() {
        return Err(Error::InvalidParam {
            name: "decisions".into(),
            detail: "importance loss needs a non-empty batch".into(),
        });
    }
    let importance = ctx.graph.sum_vars(gate_weights);
    let cv = ctx.graph.cv_squared(importance);
    Ok(ctx.graph.scale(cv, w_im))
}

/// Noise cues for a batch: per-sample `[r0, r1, r2, r3]` and the per-level
/// importance losses.
#[derive(Clone, Debug)]
pub struct NoisePyramid {
    pub levels: Vec<[Var; 4]>,
    pub decisions: Vec<[GateDecision; 4]>,
    pub importance_losses: [Var; 4],
}

impl NoisePyramid {
    /// `L_mone = sum_i L_im^i`.
    pub fn mone_loss(&self, ctx: &mut Ctx) -> Var {
        ctx.graph.sum_vars(&self.importance_losses)
    }
}

/// Four independent mixture blocks, one per pyramid level.
#[derive(Clone, Debug)]
pub struct Mnm {
    pub levels: [Mone; 4],
    pub w_im: f64,
}

impl Mnm {
    pub fn new(store: &mut ParamStore, init: &mut Init, base_channels: usize, gate: GateConfig, theta: f64) -> Self {
        let levels = [0, 1, 2, 3].map(|i| Mone::new(store, init, &format!("mnm.level{i}"), base_channels << i, gate, theta));
        Mnm { levels, w_im: gate.w_im }
    }

    /// `r_i = MoNE_i(f_i)` for every sample; importance is accumulated per
    /// level over the batch.
    pub fn forward<R: Rng>(&self, ctx: &mut Ctx, pyramids: &[[Var; 4]], training: bool, rng: &mut R) -> Result<NoisePyramid> {
        let mut levels = Vec::with_capacity(pyramids.len());
        let mut decisions = Vec::with_capacity(pyramids.len());
        let mut weights: [Vec<Var>; 4] = Default::default();
        for pyr in pyramids {
            let mut r = [pyr[0]; 4];
            let mut d: Vec<GateDecision> = Vec::with_capacity(4);
            for (i, mone) in self.levels.iter().enumerate() {
                let (y, gate) = mone.forward(ctx, pyr[i], training, rng)?;
                r[i] = y;
                weights[i].push(gate.weights);
                d.push(gate.decision);
            }
            levels.push(r);
            decisions.push(d.try_into().unwrap());
        }
        let mut losses = Vec::with_capacity(4);
        for w in &weights {
            losses.push(importance_loss_var(ctx, w, self.w_im)?);
        }
        Ok(NoisePyramid {
            levels,
            decisions,
            importance_losses: losses.try_into().unwrap(),
        })
    }

    pub fn project(&self, store: &mut ParamStore) -> usize {
        self.levels.iter().map(|m| m.project(store)).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::check_gradients;
    use crate::rng::stream_rng;
    use proptest::prelude::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Independent scalar evaluation of softmax over the top-k logits.
    fn gate_oracle(h: &[f64], k: usize) -> Vec<f64> {
        let n = h.len();
        let mut keep = vec![false; n];
        for _ in 0..k {
            let mut best: Option<usize> = None;
            for i in 0..n {
                if keep[i] {
                    continue;
                }
                if best.is_none_or(|b| h[i] > h[b]) {
                    best = Some(i);
                }
            }
            keep[best.unwrap()] = true;
        }
        let m = (0..n).filter(|&i| keep[i]).map(|i| h[i]).fold(f64::MIN, f64::max);
        let z: f64 = (0..n).filter(|&i| keep[i]).map(|i| (h[i] - m).exp()).sum();
        (0..n).map(|i| if keep[i] { (h[i] - m).exp() / z } else { 0.0 }).collect()
    }

    fn gate_with_logits(logits: [f64; 4], k: usize) -> [f64; 4] {
        // F_g with zero weight and bias = logits reproduces the given logits
        let mut store = ParamStore::new();
        let gate = Gate::new(&mut store, "g", 2, k);
        *store.get_mut(gate.f_g.bias) = Tensor::from_vec(&[4], logits.to_vec()).unwrap();
        let mut ctx = Ctx::new(&store);
        let x = ctx.graph.constant(Tensor::full(&[2, 3, 3], 0.4));
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        gate.forward(&mut ctx, x, false, &mut rng).unwrap().decision.weights
    }

    #[test]
    fn gate_examples() {
        assert_eq!(gate_with_logits([0.0; 4], 4), [0.25; 4]);
        assert_eq!(gate_with_logits([3.0, 1.0, 0.0, -2.0], 1), [1.0, 0.0, 0.0, 0.0]);
        let w = gate_with_logits([2.0, 1.0, 0.0, -1.0], 2);
        let e2 = 1f64.exp().powi(2);
        let e1 = 1f64.exp();
        assert!((w[0] - e2 / (e2 + e1)).abs() < 1e-15);
        assert!((w[1] - e1 / (e2 + e1)).abs() < 1e-15);
        assert!((w[0] - 0.7311).abs() < 1e-4 && (w[1] - 0.2689).abs() < 1e-4);
        assert_eq!(&w[2..], &[0.0, 0.0]);
    }

    #[test]
    fn gate_matches_scalar_oracle_all_k() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..25 {
            let logits: [f64; 4] = std::array::from_fn(|_| rng.random_range(-3.0..3.0));
            for k in 1..=4 {
                let got = gate_with_logits(logits, k);
                let want = gate_oracle(&logits, k);
                for n in 0..4 {
                    assert!((got[n] - want[n]).abs() < 1e-14, "k={k} {logits:?}");
                }
            }
        }
    }

    #[test]
    fn gate_rejects_bad_k() {
        let mut store = ParamStore::new();
        let gate = Gate::new(&mut store, "g", 2, 5);
        let mut ctx = Ctx::new(&store);
        let x = ctx.graph.constant(Tensor::zeros(&[2, 2, 2]));
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(gate.forward(&mut ctx, x, false, &mut rng).is_err());
        assert!(GateConfig { k: 0, w_im: 0.1 }.validate().is_err());
    }

    #[test]
    fn importance_loss_examples() {
        let uniform = GateDecision {
            weights: [0.25; 4],
            logits: [0.0; 4],
            noise_draw: [0.0; 4],
        };
        assert_eq!(importance_loss(&[uniform.clone(), uniform.clone()], 0.1).unwrap(), 0.0);
        let one_hot = GateDecision {
            weights: [1.0, 0.0, 0.0, 0.0],
            ..uniform.clone()
        };
        // importance (2, 0, 0, 0): mean 0.5, population std sqrt(0.75)
        let l = importance_loss(&[one_hot.clone(), one_hot.clone()], 0.1).unwrap();
        let mean = 0.5;
        let std = ((1.5f64.powi(2) + 3.0 * 0.25) / 4.0).sqrt();
        assert!((std - 0.8660).abs() < 1e-4);
        assert!((l - 0.1 * (std / mean).powi(2)).abs() < 1e-12);
        assert!((l - 0.3).abs() < 1e-9);
        assert_eq!(importance_loss(&[one_hot], 0.0).unwrap(), 0.0);
        assert!(importance_loss(&[], 0.1).is_err());
    }

    proptest! {
        #[test]
        fn importance_loss_permutation_and_scaling(ws in proptest::collection::vec(0.0f64..1.0, 8), w_im in 0.0f64..2.0) {
            let mk = |w: &[f64]| GateDecision { weights: [w[0], w[1], w[2], w[3]], logits: [0.0; 4], noise_draw: [0.0; 4] };
            let a = vec![mk(&ws[0..4]), mk(&ws[4..8])];
            let perm = |w: &[f64]| vec![w[2], w[0], w[3], w[1]];
            let b = vec![mk(&perm(&ws[0..4])), mk(&perm(&ws[4..8]))];
            let la = importance_loss(&a, w_im).unwrap();
            let lb = importance_loss(&b, w_im).unwrap();
            prop_assert!((la - lb).abs() <= 1e-12 * la.abs().max(1.0));
            let l1 = importance_loss(&a, 1.0).unwrap();
            prop_assert!((la - w_im * l1).abs() <= 1e-12 * la.abs().max(1.0));
        }

        #[test]
        fn gate_decision_invariants(seed in 0u64..5000, k in 1usize..=4, training in any::<bool>()) {
            let mut store = ParamStore::new();
            let mut init = Init::new(ChaCha8Rng::seed_from_u64(seed));
            let gate = Gate::new(&mut store, "g", 3, k);
            *store.get_mut(gate.f_g.weight) = init.normal(&[4, 3], 1.0);
            *store.get_mut(gate.f_noise.weight) = init.normal(&[4, 3], 1.0);
            let mut ctx = Ctx::new(&store);
            let x = ctx.graph.constant(init.normal(&[3, 4, 4], 1.0));
            let mut rng = ChaCha8Rng::seed_from_u64(seed + 1);
            let d = gate.forward(&mut ctx, x, training, &mut rng).unwrap().decision;
            prop_assert!(d.weights.iter().all(|&w| w >= 0.0));
            let kept = top_k_indices(&d.logits, k);
            let s: f64 = kept.iter().map(|&i| d.weights[i]).sum();
            prop_assert!((s - 1.0).abs() < 1e-12);
            for n in 0..4 {
                if !kept.contains(&n) {
                    prop_assert_eq!(d.weights[n], 0.0);
                }
            }
            if !training {
                prop_assert_eq!(d.noise_draw, [0.0; 4]);
            }
        }
    }

    fn build_mone(ch: usize, k: usize, seed: u64) -> (ParamStore, Mone) {
        let mut store = ParamStore::new();
        let mut init = Init::new(stream_rng(seed, "init"));
        let m = Mone::new(&mut store, &mut init, "m", ch, GateConfig { k, w_im: 0.1 }, 0.7);
        (store, m)
    }

    #[test]
    fn eval_gate_is_deterministic() {
        let (mut store, m) = build_mone(3, 2, 3);
        let mut init = Init::new(stream_rng(4, "x"));
        *store.get_mut(m.gate.f_g.weight) = init.normal(&[4, 3], 1.0);
        let x = init.normal(&[3, 5, 5], 1.0);
        let run = |rng_seed: u64| {
            let mut ctx = Ctx::new(&store);
            let xv = ctx.graph.constant(x.clone());
            let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
            let (y, g) = m.forward(&mut ctx, xv, false, &mut rng).unwrap();
            (ctx.value(y).clone(), g.decision)
        };
        let (a, da) = run(1);
        let (b, db) = run(99);
        assert_eq!(a, b);
        assert_eq!(da, db);
    }

    /// Evaluates every expert and the shared conv separately, then sums
    /// with the supplied weights.
    fn dense_oracle(store: &ParamStore, m: &Mone, x: &Tensor, weights: &[f64; 4]) -> Tensor {
        let mut ctx = Ctx::new(store);
        let xv = ctx.graph.constant(x.clone());
        let mut out = {
            let s = m.shared.forward(&mut ctx, xv);
            ctx.value(s).clone()
        };
        for n in 0..4 {
            let e = m.experts[n].forward(&mut ctx, xv).unwrap();
            let v = ctx.value(e).scale(weights[n]);
            out.add_assign(&v);
        }
        out
    }

    #[test]
    fn mone_matches_dense_oracle() {
        let (mut store, m) = build_mone(3, 3, 5);
        let mut init = Init::new(stream_rng(6, "x"));
        *store.get_mut(m.gate.f_g.weight) = init.normal(&[4, 3], 2.0);
        *store.get_mut(m.gate.f_noise.weight) = init.normal(&[4, 3], 1.0);
        for seed in 0..5 {
            let x = init.normal(&[3, 6, 6], 1.0);
            let mut ctx = Ctx::new(&store);
            let xv = ctx.graph.constant(x.clone());
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (y, g) = m.forward(&mut ctx, xv, true, &mut rng).unwrap();
            let oracle = dense_oracle(&store, &m, &x, &g.decision.weights);
            assert!(ctx.value(y).max_abs_diff(&oracle) < 1e-6);
            assert!(ctx.value(y).max_abs_diff(&oracle) < 1e-12);
        }
    }

    #[test]
    fn one_hot_gate_is_expert_plus_shared() {
        let (mut store, m) = build_mone(2, 1, 7);
        *store.get_mut(m.gate.f_g.bias) = Tensor::from_vec(&[4], vec![0.0, 0.0, 5.0, 0.0]).unwrap();
        let x = Init::new(stream_rng(8, "x")).normal(&[2, 6, 6], 1.0);
        let mut ctx = Ctx::new(&store);
        let xv = ctx.graph.constant(x.clone());
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (y, g) = m.forward(&mut ctx, xv, false, &mut rng).unwrap();
        assert_eq!(g.decision.weights, [0.0, 0.0, 1.0, 0.0]);
        let e = m.experts[2].forward(&mut ctx, xv).unwrap();
        let s = m.shared.forward(&mut ctx, xv);
        let expect = ctx.value(e).zip_map(ctx.value(s), |a, b| a + b);
        assert_eq!(ctx.value(y), &expect);
    }

    #[test]
    fn uniform_gate_without_shared_is_expert_mean() {
        let (mut store, m) = build_mone(2, 4, 9);
        *store.get_mut(m.shared.weight) = Tensor::zeros(&[2, 2, 3, 3]);
        let x = Init::new(stream_rng(10, "x")).normal(&[2, 6, 6], 1.0);
        let mut ctx = Ctx::new(&store);
        let xv = ctx.graph.constant(x.clone());
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (y, g) = m.forward(&mut ctx, xv, false, &mut rng).unwrap();
        assert_eq!(g.decision.weights, [0.25; 4]);
        let mut mean = Tensor::zeros(&[2, 6, 6]);
        for n in 0..4 {
            let e = m.experts[n].forward(&mut ctx, xv).unwrap();
            mean.add_assign(&ctx.value(e).scale(0.25));
        }
        assert!(ctx.value(y).max_abs_diff(&mean) < 1e-12);
    }

    #[test]
    fn mone_is_linear_in_expert_outputs() {
        // scaling every expert kernel (and the shared conv) by 2 doubles y
        let (mut store, m) = build_mone(2, 2, 11);
        let mut init = Init::new(stream_rng(12, "x"));
        *store.get_mut(m.gate.f_g.weight) = init.normal(&[4, 2], 1.0);
        let x = init.normal(&[2, 5, 5], 1.0);
        let run = |store: &ParamStore| {
            let mut ctx = Ctx::new(store);
            let xv = ctx.graph.constant(x.clone());
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            let (y, _) = m.forward(&mut ctx, xv, false, &mut rng).unwrap();
            ctx.value(y).clone()
        };
        let base = run(&store);
        let mut doubled = store.clone();
        for id in m.experts.iter().map(|e| e.kernels).chain([m.shared.weight, m.shared.bias.unwrap()]) {
            let t = doubled.get(id).scale(2.0);
            *doubled.get_mut(id) = t;
        }
        let y2 = run(&doubled);
        assert!(y2.max_abs_diff(&base.scale(2.0)) < 1e-12);
    }

    #[test]
    fn gate_softmax_path_gradient() {
        // gradients w.r.t. F_g / F_noise weights through the noisy gate, fixed draws
        let x = Init::new(stream_rng(13, "x")).normal(&[3, 4, 4], 1.0);
        let mut init = Init::new(stream_rng(14, "w"));
        let wg = init.normal(&[4, 3], 1.0);
        let wn = init.normal(&[4, 3], 1.0);
        let noise = Tensor::from_vec(&[1, 4], vec![0.3, -1.1, 0.8, 0.2]).unwrap();
        let probe = Tensor::from_vec(&[1, 4], vec![1.0, -2.0, 0.5, 3.0]).unwrap();
        for k in 1..=4 {
            let r = check_gradients(&[x.clone(), wg.clone(), wn.clone()], 1e-6, 64, |g, v| {
                let pooled = g.global_avg_pool(v[0]);
                let xg = g.matmul_t(pooled, v[1], false, true);
                let xn = g.matmul_t(pooled, v[2], false, true);
                let sp = g.softplus(xn);
                let sc = g.mul_const(sp, &noise);
                let h = g.add(xg, sc);
                let logits = g.value(h).data().to_vec();
                let mask = Tensor::from_vec(&[1, 4], top_k_mask(&logits, k)).unwrap();
                let m = g.add_const(h, &mask);
                let w = g.softmax_rows(m);
                let p = g.mul_const(w, &probe);
                g.sum_all(p)
            });
            assert!(r.passes(1e-4), "k={k}: {:?}", r);
        }
    }

    #[test]
    fn mnm_zero_pyramid_and_loss_sum() {
        let mut store = ParamStore::new();
        let mut init = Init::new(stream_rng(15, "init"));
        let mnm = Mnm::new(&mut store, &mut init, 2, GateConfig::default(), 0.7);
        let shapes = [[2, 8, 8], [4, 4, 4], [8, 2, 2], [16, 1, 1]];
        // zero pyramid with zero shared bias -> zero noise pyramid
        let mut ctx = Ctx::new(&store);
        let pyr = shapes.map(|s| ctx.graph.constant(Tensor::zeros(&s)));
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let np = mnm.forward(&mut ctx, &[pyr], false, &mut rng).unwrap();
        for r in np.levels[0] {
            assert!(ctx.value(r).data().iter().all(|&v| v == 0.0));
        }

        // random batch: shapes preserved, L_mone = sum of recomputed level losses
        let mut ctx = Ctx::new(&store);
        let pyrs: Vec<[Var; 4]> = (0..3).map(|_| shapes.map(|s| ctx.graph.constant(init.normal(&s, 1.0)))).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let np = mnm.forward(&mut ctx, &pyrs, true, &mut rng).unwrap();
        for (b, r) in np.levels.iter().enumerate() {
            for i in 0..4 {
                assert_eq!(ctx.graph.shape(r[i]), ctx.graph.shape(pyrs[b][i]));
            }
        }
        let total = np.mone_loss(&mut ctx);
        let recomputed: f64 = (0..4)
            .map(|i| {
                let ds: Vec<GateDecision> = np.decisions.iter().map(|d| d[i].clone()).collect();
                importance_loss(&ds, 0.1).unwrap()
            })
            .sum();
        assert!((ctx.value(total).item() - recomputed).abs() < 1e-12);
    }
}
