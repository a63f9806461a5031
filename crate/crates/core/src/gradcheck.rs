//! Central finite-difference gradient checking.
//!
//! The numeric side only ever evaluates forward values, so it stays
//! independent of every backward closure it verifies.

use crate::autograd::{Graph, Var};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// Largest `|analytic - numeric| / (max(|analytic|, |numeric|) + floor)`.
    pub max_rel_error: f64,
    /// `(input, element)` where the worst error occurred.
    pub worst: (usize, usize),
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
}

impl GradCheckReport {
    pub fn passes(&self, rtol: f64) -> bool {
        self.max_rel_error <= rtol
    }
}

/// Compares reverse-mode gradients of the scalar `f(inputs)` against central
/// differences with step `eps`.
///
/// At most `max_per_input` elements of each input are probed, spread evenly
/// across the tensor. The error denominator carries a floor of
/// `1e-6 * max(1, max|grad|)` plus the central-difference round-off level
/// `16 * eps_mach * |f| / eps`, so near-zero components are judged against
/// what the numeric side can resolve.
pub fn check_gradients<F>(inputs: &[Tensor], eps: f64, max_per_input: usize, f: F) -> GradCheckReport
where
    F: Fn(&mut Graph, &[Var]) -> Var,
{
    let eval = |xs: &[Tensor]| -> f64 {
        let mut g = Graph::new();
        let vars: Vec<Var> = xs.iter().map(|t| g.constant(t.clone())).collect();
        let out = f(&mut g, &vars);
        g.value(out).item()
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.variable(t.clone())).collect();
    let out = f(&mut g, &vars);
    assert_eq!(g.value(out).len(), 1, "gradient check needs a scalar output");
    let f0 = g.value(out).item();
    let grads = g.backward(out);
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(inputs)
        .map(|(v, t)| grads.get(*v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();
    let gmax = analytic
        .iter()
        .flat_map(|t| t.data().iter())
        .fold(0.0f64, |m, v| m.max(v.abs()));
    let floor = error_floor(gmax, f0, eps);

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: (0, 0),
        analytic: 0.0,
        numeric: 0.0,
        checked: 0,
    };
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (ti, t) in inputs.iter().enumerate() {
        let n = t.len();
        let step = n.div_ceil(max_per_input.max(1)).max(1);
        for idx in (0..n).step_by(step) {
            let orig = t.data()[idx];
            work[ti].data_mut()[idx] = orig + eps;
            let fp = eval(&work);
            work[ti].data_mut()[idx] = orig - eps;
            let fm = eval(&work);
            work[ti].data_mut()[idx] = orig;
            let numeric = (fp - fm) / (2.0 * eps);
            let a = analytic[ti].data()[idx];
            let rel = (a - numeric).abs() / (a.abs().max(numeric.abs()) + floor);
            report.checked += 1;
            if rel > report.max_rel_error || rel.is_nan() {
                report.max_rel_error = if rel.is_nan() { f64::INFINITY } else { rel };
                report.worst = (ti, idx);
                report.analytic = a;
                report.numeric = numeric;
            }
        }
    }
    report
}

fn error_floor(gmax: f64, f0: f64, eps: f64) -> f64 {
    1e-6 * gmax.max(1.0) + 16.0 * f64::EPSILON * f0.abs().max(1.0) / eps
}

/// Finite-difference check of parameter gradients for a scalar built from a
/// [`Ctx`]. Probes at most `max_per_param` elements of each listed parameter.
pub fn check_param_gradients<F>(
    store: &crate::params::ParamStore,
    ids: &[crate::params::ParamId],
    eps: f64,
    max_per_param: usize,
    f: F,
) -> GradCheckReport
where
    F: Fn(&mut crate::params::Ctx) -> Var,
{
    use crate::params::Ctx;
    let eval = |s: &crate::params::ParamStore| -> f64 {
        let mut ctx = Ctx::new(s);
        let out = f(&mut ctx);
        ctx.value(out).item()
    };
    let mut ctx = Ctx::new(store);
    let out = f(&mut ctx);
    assert_eq!(ctx.value(out).len(), 1, "gradient check needs a scalar output");
    let f0 = ctx.value(out).item();
    let mut grads = ctx.graph.backward(out);
    let pg = ctx.param_grads(&mut grads);
    let analytic: Vec<Tensor> = ids
        .iter()
        .map(|id| pg[id.0].clone().unwrap_or_else(|| Tensor::zeros(store.get(*id).shape())))
        .collect();
    let gmax = analytic
        .iter()
        .flat_map(|t| t.data().iter())
        .fold(0.0f64, |m, v| m.max(v.abs()));
    let floor = error_floor(gmax, f0, eps);
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: (0, 0),
        analytic: 0.0,
        numeric: 0.0,
        checked: 0,
    };
    let mut work = store.clone();
    for (pi, id) in ids.iter().enumerate() {
        let n = store.get(*id).len();
        let step = n.div_ceil(max_per_param.max(1)).max(1);
        for idx in (0..n).step_by(step) {
            let orig = store.get(*id).data()[idx];
            work.get_mut(*id).data_mut()[idx] = orig + eps;
            let fp = eval(&work);
            work.get_mut(*id).data_mut()[idx] = orig - eps;
            let fm = eval(&work);
            work.get_mut(*id).data_mut()[idx] = orig;
            let numeric = (fp - fm) / (2.0 * eps);
            let a = analytic[pi].data()[idx];
            let rel = (a - numeric).abs() / (a.abs().max(numeric.abs()) + floor);
            report.checked += 1;
            if rel > report.max_rel_error || rel.is_nan() {
                report.max_rel_error = if rel.is_nan() { f64::INFINITY } else { rel };
                report.worst = (pi, idx);
                report.analytic = a;
                report.numeric = numeric;
            }
        }
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::ConvSpec;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    fn assert_ok(r: GradCheckReport) {
        assert!(r.passes(1e-6), "{:?}", r);
    }

    #[test]
    fn matmul_all_transpose_combinations() {
        for (ta, tb) in [(false, false), (true, false), (false, true), (true, true)] {
            let a = rand_tensor(if ta { &[4, 3] } else { &[3, 4] }, 1);
            let b = rand_tensor(if tb { &[5, 4] } else { &[4, 5] }, 2);
            let w = rand_tensor(&[3, 5], 3);
            assert_ok(check_gradients(&[a, b, w], 1e-6, 64, |g, v| {
                let m = g.matmul_t(v[0], v[1], ta, tb);
                let p = g.mul(m, v[2]);
                g.sum_all(p)
            }));
        }
    }

    #[test]
    fn conv_strided_grouped_padded() {
        let x = rand_tensor(&[4, 7, 6], 4);
        for spec in [
            ConvSpec::same(3),
            ConvSpec::strided(2, 1),
            ConvSpec::depthwise(5, 4),
            ConvSpec { stride: 2, padding: 0, groups: 2 },
        ] {
            let k = if spec.groups == 4 { 5 } else { 3 };
            let w = rand_tensor(&[4, 4 / spec.groups, k, k], 5);
            let x2 = x.clone();
            let probe = {
                let mut g = Graph::new();
                let a = g.constant(x2.clone());
                let b = g.constant(w.clone());
                let o = g.conv2d(a, b, spec);
                rand_tensor(g.shape(o), 6)
            };
            assert_ok(check_gradients(&[x2, w], 1e-6, 200, |g, v| {
                let o = g.conv2d(v[0], v[1], spec);
                let p = g.mul_const(o, &probe);
                g.sum_all(p)
            }));
        }
    }

    #[test]
    fn elementwise_and_norm_ops() {
        let x = rand_tensor(&[3, 6], 7);
        let gamma = rand_tensor(&[6], 8);
        let beta = rand_tensor(&[6], 9);
        let probe = rand_tensor(&[3, 6], 10);
        assert_ok(check_gradients(&[x, gamma, beta], 1e-6, 64, |g, v| {
            let n = g.layer_norm_rows(v[0], v[1], v[2], 1e-5);
            let a = g.gelu(n);
            let s = g.softplus(a);
            let t = g.sigmoid(s);
            let sm = g.softmax_rows(t);
            let p = g.mul_const(sm, &probe);
            g.sum_all(p)
        }));
    }

    #[test]
    fn resize_slices_and_losses() {
        let x = rand_tensor(&[2, 3, 4], 11);
        let probe = rand_tensor(&[2, 6, 8], 12);
        assert_ok(check_gradients(&[x], 1e-6, 64, |g, v| {
            let up = g.resize_bilinear(v[0], 6, 8);
            let p = g.mul_const(up, &probe);
            g.sum_all(p)
        }));
        let logits = rand_tensor(&[2, 5], 13);
        assert_ok(check_gradients(std::slice::from_ref(&logits), 1e-6, 64, |g, v| g.cross_entropy_cols(v[0], &[0, 1, 1, 0, 1])));
        let t = [0.0, 1.0, 1.0, 0.0, 0.5];
        let flat = logits.clone().reshape(&[1, 10]).unwrap();
        assert_ok(check_gradients(&[flat], 1e-6, 64, |g, v| {
            let s = g.slice_cols(v[0], 0, 5);
            g.bce_with_logits(s, &t)
        }));
        let m = rand_tensor(&[3, 5], 14);
        assert_ok(check_gradients(&[m], 1e-6, 64, |g, v| {
            let a = g.slice_cols(v[0], 1, 3);
            let b = g.slice_cols(v[0], 3, 5);
            let c = g.concat_cols(&[b, a]);
            let r = g.mean_rows(c);
            let q = g.mul(r, r);
            g.sum_all(q)
        }));
    }

    #[test]
    fn cv_squared_gradient() {
        let v = Tensor::from_vec(&[4], vec![0.3, 1.2, 0.7, 2.0]).unwrap();
        assert_ok(check_gradients(&[v], 1e-6, 8, |g, v| g.cv_squared(v[0])));
    }
}
