use super::{Graph, Var};
use crate::tensor::{gemm, Tensor};

/// Stride, zero padding and channel grouping of a 2-D convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

impl ConvSpec {
    /// Stride 1 with padding that preserves spatial size for odd `kernel`.
    pub fn same(kernel: usize) -> Self {
        ConvSpec {
            stride: 1,
            padding: kernel / 2,
            groups: 1,
        }
    }

    pub fn strided(stride: usize, padding: usize) -> Self {
        ConvSpec {
            stride,
            padding,
            groups: 1,
        }
    }

    pub fn depthwise(kernel: usize, channels: usize) -> Self {
        ConvSpec {
            stride: 1,
            padding: kernel / 2,
            groups: channels,
        }
    }
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

#[inline]
fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

#[inline]
fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + 0.044715 * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

pub(crate) fn sigmoid_scalar(x: f64) -> f64 {
    sigmoid(x)
}

/// Row-wise softmax that treats `-inf` entries as exactly zero probability.
pub(crate) fn softmax_rows_forward(x: &Tensor) -> Tensor {
    let d = *x.shape().last().unwrap();
    let mut out = x.clone();
    for row in out.data_mut().chunks_mut(d) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for v in row.iter_mut() {
            *v = if *v == f64::NEG_INFINITY { 0.0 } else { (*v - max).exp() };
            total += *v;
        }
        for v in row.iter_mut() {
            *v /= total;
        }
    }
    out
}

fn im2col(
    x: &[f64],
    (c0, cn): (usize, usize),
    (h, w): (usize, usize),
    k: usize,
    spec: ConvSpec,
    (ho, wo): (usize, usize),
) -> Vec<f64> {
    let mut cols = vec![0.0; cn * k * k * ho * wo];
    let (s, p) = (spec.stride as isize, spec.padding as isize);
    for c in 0..cn {
        let plane = &x[(c0 + c) * h * w..(c0 + c + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let dst = &mut cols[row * ho * wo..(row + 1) * ho * wo];
                for oy in 0..ho {
                    let iy = oy as isize * s + ky as isize - p;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    let drow = &mut dst[oy * wo..(oy + 1) * wo];
                    for (ox, d) in drow.iter_mut().enumerate() {
                        let ix = ox as isize * s + kx as isize - p;
                        if ix >= 0 && ix < w as isize {
                            *d = src[ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im_add(
    cols: &[f64],
    dx: &mut [f64],
    (c0, cn): (usize, usize),
    (h, w): (usize, usize),
    k: usize,
    spec: ConvSpec,
    (ho, wo): (usize, usize),
) {
    let (s, p) = (spec.stride as isize, spec.padding as isize);
    for c in 0..cn {
        let plane = &mut dx[(c0 + c) * h * w..(c0 + c + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let src = &cols[row * ho * wo..(row + 1) * ho * wo];
                for oy in 0..ho {
                    let iy = oy as isize * s + ky as isize - p;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..wo {
                        let ix = ox as isize * s + kx as isize - p;
                        if ix >= 0 && ix < w as isize {
                            plane[iy as usize * w + ix as usize] += src[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Forward 2-D convolution (cross-correlation) of a `Ci×H×W` map with a
/// `Co×(Ci/groups)×k×k` kernel bank.
pub fn conv2d_forward(x: &Tensor, weight: &Tensor, spec: ConvSpec) -> Tensor {
    let (ci, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (co, k) = (weight.shape()[0], weight.shape()[2]);
    let g = spec.groups;
    let (cin_g, cout_g) = (ci / g, co / g);
    let ho = (h + 2 * spec.padding - k) / spec.stride + 1;
    let wo = (w + 2 * spec.padding - k) / spec.stride + 1;
    let mut out = Tensor::zeros(&[co, ho, wo]);
    let kk = cin_g * k * k;
    for gi in 0..g {
        let cols = im2col(x.data(), (gi * cin_g, cin_g), (h, w), k, spec, (ho, wo));
        let wg = &weight.data()[gi * cout_g * kk..(gi + 1) * cout_g * kk];
        let og = &mut out.data_mut()[gi * cout_g * ho * wo..(gi + 1) * cout_g * ho * wo];
        gemm(cout_g, kk, ho * wo, wg, false, &cols, false, 0.0, og);
    }
    out
}

/// Bilinear interpolation table along one axis (half-pixel centres,
/// edge-clamped).
fn bilinear_axis(in_len: usize, out_len: usize) -> Vec<(usize, usize, f64)> {
    let scale = in_len as f64 / out_len as f64;
    (0..out_len)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(in_len - 1);
            let i1 = (i0 + 1).min(in_len - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

/// Bilinear resize of a `C×H×W` tensor to `C×out_h×out_w`.
pub fn resize_bilinear(x: &Tensor, out_h: usize, out_w: usize) -> Tensor {
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let ys = bilinear_axis(h, out_h);
    let xs = bilinear_axis(w, out_w);
    let mut out = Tensor::zeros(&[c, out_h, out_w]);
    let src = x.data();
    let dst = out.data_mut();
    for ch in 0..c {
        let plane = &src[ch * h * w..(ch + 1) * h * w];
        for (oy, &(y0, y1, ly)) in ys.iter().enumerate() {
            for (ox, &(x0, x1, lx)) in xs.iter().enumerate() {
                let top = (1.0 - lx) * plane[y0 * w + x0] + lx * plane[y0 * w + x1];
                let bot = (1.0 - lx) * plane[y1 * w + x0] + lx * plane[y1 * w + x1];
                dst[(ch * out_h + oy) * out_w + ox] = (1.0 - ly) * top + ly * bot;
            }
        }
    }
    out
}

fn resize_bilinear_adjoint(g: &Tensor, in_h: usize, in_w: usize) -> Tensor {
    let (c, oh, ow) = (g.shape()[0], g.shape()[1], g.shape()[2]);
    let ys = bilinear_axis(in_h, oh);
    let xs = bilinear_axis(in_w, ow);
    let mut dx = Tensor::zeros(&[c, in_h, in_w]);
    let gd = g.data();
    let d = dx.data_mut();
    for ch in 0..c {
        let plane = &mut d[ch * in_h * in_w..(ch + 1) * in_h * in_w];
        for (oy, &(y0, y1, ly)) in ys.iter().enumerate() {
            for (ox, &(x0, x1, lx)) in xs.iter().enumerate() {
                let v = gd[(ch * oh + oy) * ow + ox];
                plane[y0 * in_w + x0] += (1.0 - ly) * (1.0 - lx) * v;
                plane[y0 * in_w + x1] += (1.0 - ly) * lx * v;
                plane[y1 * in_w + x0] += ly * (1.0 - lx) * v;
                plane[y1 * in_w + x1] += ly * lx * v;
            }
        }
    }
    dx
}

impl Graph {
    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, df: fn(f64, f64) -> f64) -> Var {
        let out = self.value(x).map(f);
        self.push(
            out,
            vec![x],
            Box::new(move |g, y, inp| vec![Some(Tensor::from_fn(g.shape(), |i| g.data()[i] * df(inp[0].data()[i], y.data()[i])))]),
        )
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "add shape mismatch");
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y);
        self.push(out, vec![a, b], Box::new(|g, _, _| vec![Some(g.clone()), Some(g.clone())]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "sub shape mismatch");
        let out = self.value(a).zip_map(self.value(b), |x, y| x - y);
        self.push(out, vec![a, b], Box::new(|g, _, _| vec![Some(g.clone()), Some(g.scale(-1.0))]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "mul shape mismatch");
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y);
        self.push(
            out,
            vec![a, b],
            Box::new(|g, _, inp| {
                vec![
                    Some(g.zip_map(inp[1], |gv, bv| gv * bv)),
                    Some(g.zip_map(inp[0], |gv, av| gv * av)),
                ]
            }),
        )
    }

    /// Sum of same-shaped nodes.
    pub fn sum_vars(&mut self, vars: &[Var]) -> Var {
        assert!(!vars.is_empty(), "sum_vars of empty list");
        let mut out = self.value(vars[0]).clone();
        for v in &vars[1..] {
            assert_eq!(self.shape(*v), out.shape(), "sum_vars shape mismatch");
            out.add_assign(self.value(*v));
        }
        let n = vars.len();
        self.push(out, vars.to_vec(), Box::new(move |g, _, _| (0..n).map(|_| Some(g.clone())).collect()))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let out = self.value(x).scale(c);
        self.push(out, vec![x], Box::new(move |g, _, _| vec![Some(g.scale(c))]))
    }

    /// Adds a constant tensor (no gradient flows into it).
    pub fn add_const(&mut self, x: Var, t: &Tensor) -> Var {
        assert_eq!(self.shape(x), t.shape(), "add_const shape mismatch");
        let out = self.value(x).zip_map(t, |a, b| a + b);
        self.push(out, vec![x], Box::new(|g, _, _| vec![Some(g.clone())]))
    }

    /// Multiplies by a constant tensor.
    pub fn mul_const(&mut self, x: Var, t: &Tensor) -> Var {
        assert_eq!(self.shape(x), t.shape(), "mul_const shape mismatch");
        let out = self.value(x).zip_map(t, |a, b| a * b);
        let t = t.clone();
        self.push(out, vec![x], Box::new(move |g, _, _| vec![Some(g.zip_map(&t, |a, b| a * b))]))
    }

    /// `x * s[index]`: scales a whole tensor by one entry of another node.
    pub fn mul_scalar_at(&mut self, x: Var, s: Var, index: usize) -> Var {
        let c = self.value(s).data()[index];
        let out = self.value(x).scale(c);
        self.push(
            out,
            vec![x, s],
            Box::new(move |g, _, inp| {
                let c = inp[1].data()[index];
                let mut gs = Tensor::zeros(inp[1].shape());
                gs.data_mut()[index] = g.data().iter().zip(inp[0].data()).map(|(a, b)| a * b).sum();
                vec![Some(g.scale(c)), Some(gs)]
            }),
        )
    }

    /// `x[n×d] + b[d]` broadcast over rows.
    pub fn add_row_bias(&mut self, x: Var, b: Var) -> Var {
        let d = *self.shape(x).last().unwrap();
        assert_eq!(self.value(b).len(), d, "add_row_bias width mismatch");
        let mut out = self.value(x).clone();
        let bd = self.value(b).data().to_vec();
        for row in out.data_mut().chunks_mut(d) {
            for (v, bv) in row.iter_mut().zip(&bd) {
                *v += bv;
            }
        }
        self.push(
            out,
            vec![x, b],
            Box::new(move |g, _, inp| {
                let mut gb = Tensor::zeros(inp[1].shape());
                for row in g.data().chunks(d) {
                    for (a, v) in gb.data_mut().iter_mut().zip(row) {
                        *a += v;
                    }
                }
                vec![Some(g.clone()), Some(gb)]
            }),
        )
    }

    /// `x[C×…] + b[C]` broadcast over the trailing axes.
    pub fn add_channel_bias(&mut self, x: Var, b: Var) -> Var {
        let c = self.shape(x)[0];
        assert_eq!(self.value(b).len(), c, "add_channel_bias channel mismatch");
        let plane = self.value(x).len() / c;
        let mut out = self.value(x).clone();
        let bd = self.value(b).data().to_vec();
        for (ch, chunk) in out.data_mut().chunks_mut(plane).enumerate() {
            for v in chunk {
                *v += bd[ch];
            }
        }
        self.push(
            out,
            vec![x, b],
            Box::new(move |g, _, inp| {
                let gb: Vec<f64> = g.data().chunks(plane).map(|c| c.iter().sum()).collect();
                vec![Some(g.clone()), Some(Tensor::from_vec(inp[1].shape(), gb).unwrap())]
            }),
        )
    }

    /// Matrix product `op(a)·op(b)` where `op` optionally transposes.
    pub fn matmul_t(&mut self, a: Var, b: Var, trans_a: bool, trans_b: bool) -> Var {
        let (sa, sb) = (self.shape(a), self.shape(b));
        assert!(sa.len() == 2 && sb.len() == 2, "matmul needs 2-D operands");
        let (m, ka) = if trans_a { (sa[1], sa[0]) } else { (sa[0], sa[1]) };
        let (kb, n) = if trans_b { (sb[1], sb[0]) } else { (sb[0], sb[1]) };
        assert_eq!(ka, kb, "matmul inner dimension mismatch: {:?} x {:?}", sa, sb);
        let k = ka;
        let mut out = Tensor::zeros(&[m, n]);
        gemm(m, k, n, self.value(a).data(), trans_a, self.value(b).data(), trans_b, 0.0, out.data_mut());
        self.push(
            out,
            vec![a, b],
            Box::new(move |g, _, inp| {
                let (av, bv) = (inp[0], inp[1]);
                let mut ga = Tensor::zeros(av.shape());
                if trans_a {
                    gemm(k, n, m, bv.data(), trans_b, g.data(), true, 0.0, ga.data_mut());
                } else {
                    gemm(m, n, k, g.data(), false, bv.data(), !trans_b, 0.0, ga.data_mut());
                }
                let mut gb = Tensor::zeros(bv.shape());
                if trans_b {
                    gemm(n, m, k, g.data(), true, av.data(), trans_a, 0.0, gb.data_mut());
                } else {
                    gemm(k, m, n, av.data(), !trans_a, g.data(), false, 0.0, gb.data_mut());
                }
                vec![Some(ga), Some(gb)]
            }),
        )
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        self.matmul_t(a, b, false, false)
    }

    pub fn transpose(&mut self, x: Var) -> Var {
        assert_eq!(self.shape(x).len(), 2, "transpose needs a 2-D operand");
        let out = self.value(x).transpose2();
        self.push(out, vec![x], Box::new(|g, _, _| vec![Some(g.transpose2())]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let out = self.value(x).clone().reshape(shape).expect("reshape size mismatch");
        self.push(
            out,
            vec![x],
            Box::new(|g, _, inp| vec![Some(g.clone().reshape(inp[0].shape()).unwrap())]),
        )
    }

    /// Columns `start..end` of a 2-D node.
    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Var {
        let (r, c) = (self.shape(x)[0], self.shape(x)[1]);
        assert!(start < end && end <= c, "slice_cols out of range");
        let w = end - start;
        let src = self.value(x).data();
        let out = Tensor::from_fn(&[r, w], |i| src[(i / w) * c + start + i % w]);
        self.push(
            out,
            vec![x],
            Box::new(move |g, _, _| {
                let mut gx = Tensor::zeros(&[r, c]);
                for i in 0..r {
                    gx.data_mut()[i * c + start..i * c + end].copy_from_slice(&g.data()[i * w..(i + 1) * w]);
                }
                vec![Some(gx)]
            }),
        )
    }

    /// Horizontal concatenation of 2-D nodes with equal row counts.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let r = self.shape(parts[0])[0];
        let widths: Vec<usize> = parts.iter().map(|p| self.shape(*p)[1]).collect();
        assert!(parts.iter().all(|p| self.shape(*p)[0] == r), "concat_cols row mismatch");
        let c: usize = widths.iter().sum();
        let mut out = Tensor::zeros(&[r, c]);
        let mut off = 0;
        for (p, &w) in parts.iter().zip(&widths) {
            let src = self.value(*p).data();
            for i in 0..r {
                out.data_mut()[i * c + off..i * c + off + w].copy_from_slice(&src[i * w..(i + 1) * w]);
            }
            off += w;
        }
        self.push(
            out,
            parts.to_vec(),
            Box::new(move |g, _, _| {
                let mut off = 0;
                widths
                    .iter()
                    .map(|&w| {
                        let t = Tensor::from_fn(&[r, w], |i| g.data()[(i / w) * c + off + i % w]);
                        off += w;
                        Some(t)
                    })
                    .collect()
            }),
        )
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.max(0.0), |xv, _| if xv > 0.0 { 1.0 } else { 0.0 })
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        self.unary(x, gelu, |xv, _| gelu_grad(xv))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, sigmoid, |_, y| y * (1.0 - y))
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        self.unary(x, softplus, |xv, _| sigmoid(xv))
    }

    /// Softmax along the last axis; `-inf` logits get exactly zero weight.
    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let out = softmax_rows_forward(self.value(x));
        let d = *out.shape().last().unwrap();
        self.push(
            out,
            vec![x],
            Box::new(move |g, y, _| {
                let mut gx = Tensor::zeros(y.shape());
                for ((gr, yr), dr) in g.data().chunks(d).zip(y.data().chunks(d)).zip(gx.data_mut().chunks_mut(d)) {
                    let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    for i in 0..d {
                        dr[i] = yr[i] * (gr[i] - dot);
                    }
                }
                vec![Some(gx)]
            }),
        )
    }

    /// Layer normalisation of each row of an `n×d` node with affine
    /// parameters `gamma[d]`, `beta[d]`.
    pub fn layer_norm_rows(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let d = self.shape(x)[1];
        assert_eq!(self.value(gamma).len(), d, "layer_norm gamma width");
        assert_eq!(self.value(beta).len(), d, "layer_norm beta width");
        let xv = self.value(x);
        let (gm, bt) = (self.value(gamma).data(), self.value(beta).data());
        let mut out = Tensor::zeros(xv.shape());
        for (xr, or) in xv.data().chunks(d).zip(out.data_mut().chunks_mut(d)) {
            let mean = xr.iter().sum::<f64>() / d as f64;
            let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + eps).sqrt();
            for i in 0..d {
                or[i] = (xr[i] - mean) * inv * gm[i] + bt[i];
            }
        }
        self.push(
            out,
            vec![x, gamma, beta],
            Box::new(move |g, _, inp| {
                let (xv, gm) = (inp[0], inp[1].data());
                let mut gx = Tensor::zeros(xv.shape());
                let mut gg = vec![0.0; d];
                let mut gb = vec![0.0; d];
                let mut xhat = vec![0.0; d];
                let mut dxhat = vec![0.0; d];
                for ((xr, gr), dr) in xv.data().chunks(d).zip(g.data().chunks(d)).zip(gx.data_mut().chunks_mut(d)) {
                    let mean = xr.iter().sum::<f64>() / d as f64;
                    let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
                    let inv = 1.0 / (var + eps).sqrt();
                    let (mut m1, mut m2) = (0.0, 0.0);
                    for i in 0..d {
                        xhat[i] = (xr[i] - mean) * inv;
                        dxhat[i] = gr[i] * gm[i];
                        gg[i] += gr[i] * xhat[i];
                        gb[i] += gr[i];
                        m1 += dxhat[i];
                        m2 += dxhat[i] * xhat[i];
                    }
                    m1 /= d as f64;
                    m2 /= d as f64;
                    for i in 0..d {
                        dr[i] = inv * (dxhat[i] - m1 - xhat[i] * m2);
                    }
                }
                vec![
                    Some(gx),
                    Some(Tensor::from_vec(inp[1].shape(), gg).unwrap()),
                    Some(Tensor::from_vec(inp[2].shape(), gb).unwrap()),
                ]
            }),
        )
    }

    /// Mean over rows of an `n×d` node, giving `1×d`.
    pub fn mean_rows(&mut self, x: Var) -> Var {
        let (n, d) = (self.shape(x)[0], self.shape(x)[1]);
        let mut out = Tensor::zeros(&[1, d]);
        for row in self.value(x).data().chunks(d) {
            for (o, v) in out.data_mut().iter_mut().zip(row) {
                *o += v / n as f64;
            }
        }
        self.push(
            out,
            vec![x],
            Box::new(move |g, _, _| vec![Some(Tensor::from_fn(&[n, d], |i| g.data()[i % d] / n as f64))]),
        )
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).sum());
        self.push(
            out,
            vec![x],
            Box::new(|g, _, inp| vec![Some(Tensor::full(inp[0].shape(), g.item()))]),
        )
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let n = self.value(x).len() as f64;
        let s = self.sum_all(x);
        self.scale(s, 1.0 / n)
    }

    /// Global average pooling of a `C×H×W` map to a `1×C` row.
    pub fn global_avg_pool(&mut self, x: Var) -> Var {
        let c = self.shape(x)[0];
        let plane = self.value(x).len() / c;
        let means: Vec<f64> = self.value(x).data().chunks(plane).map(|p| p.iter().sum::<f64>() / plane as f64).collect();
        let shape = self.shape(x).to_vec();
        self.push(
            Tensor::from_vec(&[1, c], means).unwrap(),
            vec![x],
            Box::new(move |g, _, _| vec![Some(Tensor::from_fn(&shape, |i| g.data()[i / plane] / plane as f64))]),
        )
    }

    /// 2-D convolution without bias. `x`: `Ci×H×W`; `weight`: `Co×(Ci/groups)×k×k`.
    pub fn conv2d(&mut self, x: Var, weight: Var, spec: ConvSpec) -> Var {
        let (xs, ws) = (self.shape(x).to_vec(), self.shape(weight).to_vec());
        assert_eq!(xs.len(), 3, "conv2d input must be C×H×W");
        assert_eq!(ws.len(), 4, "conv2d weight must be Co×Ci×k×k");
        assert_eq!(ws[2], ws[3], "conv2d needs square kernels");
        let g = spec.groups;
        assert!(xs[0] % g == 0 && ws[0] % g == 0, "conv2d groups must divide channels");
        assert_eq!(ws[1], xs[0] / g, "conv2d input channel mismatch: x {:?}, w {:?}", xs, ws);
        let out = conv2d_forward(self.value(x), self.value(weight), spec);
        let (ho, wo) = (out.shape()[1], out.shape()[2]);
        self.push(
            out,
            vec![x, weight],
            Box::new(move |gout, _, inp| {
                let (xv, wv) = (inp[0], inp[1]);
                let (ci, h, w) = (xs[0], xs[1], xs[2]);
                let (co, k) = (ws[0], ws[2]);
                let (cin_g, cout_g) = (ci / g, co / g);
                let kk = cin_g * k * k;
                let mut gx = Tensor::zeros(&xs);
                let mut gw = Tensor::zeros(&ws);
                let mut dcols = vec![0.0; kk * ho * wo];
                for gi in 0..g {
                    let cols = im2col(xv.data(), (gi * cin_g, cin_g), (h, w), k, spec, (ho, wo));
                    let go = &gout.data()[gi * cout_g * ho * wo..(gi + 1) * cout_g * ho * wo];
                    let gwg = &mut gw.data_mut()[gi * cout_g * kk..(gi + 1) * cout_g * kk];
                    gemm(cout_g, ho * wo, kk, go, false, &cols, true, 0.0, gwg);
                    let wg = &wv.data()[gi * cout_g * kk..(gi + 1) * cout_g * kk];
                    gemm(kk, cout_g, ho * wo, wg, true, go, false, 0.0, &mut dcols);
                    col2im_add(&dcols, gx.data_mut(), (gi * cin_g, cin_g), (h, w), k, spec, (ho, wo));
                }
                vec![Some(gx), Some(gw)]
            }),
        )
    }

    /// Sums a `Co×Ci×k×k` kernel bank over its spatial axes, giving `Co×Ci×1×1`.
    pub fn kernel_spatial_sum(&mut self, w: Var) -> Var {
        let s = self.shape(w).to_vec();
        let kk = s[2] * s[3];
        let sums: Vec<f64> = self.value(w).data().chunks(kk).map(|c| c.iter().sum()).collect();
        self.push(
            Tensor::from_vec(&[s[0], s[1], 1, 1], sums).unwrap(),
            vec![w],
            Box::new(move |g, _, _| vec![Some(Tensor::from_fn(&s, |i| g.data()[i / kk]))]),
        )
    }

    /// Bilinear resize of a `C×H×W` node (half-pixel centres).
    pub fn resize_bilinear(&mut self, x: Var, out_h: usize, out_w: usize) -> Var {
        let (h, w) = (self.shape(x)[1], self.shape(x)[2]);
        let out = resize_bilinear(self.value(x), out_h, out_w);
        self.push(out, vec![x], Box::new(move |g, _, _| vec![Some(resize_bilinear_adjoint(g, h, w))]))
    }

    /// Mean softmax cross-entropy over the columns of a `K×N` logit matrix
    /// (classes along rows) against per-column class indices.
    pub fn cross_entropy_cols(&mut self, logits: Var, targets: &[usize]) -> Var {
        let (k, n) = (self.shape(logits)[0], self.shape(logits)[1]);
        assert_eq!(targets.len(), n, "cross_entropy target length");
        let lv = self.value(logits).data();
        let mut probs = vec![0.0; k * n];
        let mut loss = 0.0;
        for col in 0..n {
            let max = (0..k).map(|r| lv[r * n + col]).fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = (0..k).map(|r| (lv[r * n + col] - max).exp()).sum();
            for r in 0..k {
                probs[r * n + col] = (lv[r * n + col] - max).exp() / z;
            }
            loss += -(lv[targets[col] * n + col] - max - z.ln());
        }
        let targets = targets.to_vec();
        self.push(
            Tensor::scalar(loss / n as f64),
            vec![logits],
            Box::new(move |g, _, _| {
                let scale = g.item() / n as f64;
                let mut gl = probs.clone();
                for (col, &t) in targets.iter().enumerate() {
                    gl[t * n + col] -= 1.0;
                }
                for v in gl.iter_mut() {
                    *v *= scale;
                }
                vec![Some(Tensor::from_vec(&[k, n], gl).unwrap())]
            }),
        )
    }

    /// Mean binary cross-entropy with logits against targets in `[0, 1]`.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &[f64]) -> Var {
        let lv = self.value(logits).data();
        assert_eq!(lv.len(), targets.len(), "bce target length");
        let n = lv.len() as f64;
        let loss: f64 = lv
            .iter()
            .zip(targets)
            .map(|(&z, &t)| z.max(0.0) - z * t + (-z.abs()).exp().ln_1p())
            .sum::<f64>()
            / n;
        let targets = targets.to_vec();
        self.push(
            Tensor::scalar(loss),
            vec![logits],
            Box::new(move |g, _, inp| {
                let scale = g.item() / n;
                vec![Some(Tensor::from_fn(inp[0].shape(), |i| (sigmoid(inp[0].data()[i]) - targets[i]) * scale))]
            }),
        )
    }

    /// Squared coefficient of variation `(std/mean)^2` of a vector using the
    /// population standard deviation; zero when the mean is zero.
    pub fn cv_squared(&mut self, v: Var) -> Var {
        let x = self.value(v).data();
        let n = x.len() as f64;
        let mean = x.iter().sum::<f64>() / n;
        let value = if mean == 0.0 {
            0.0
        } else {
            let var = x.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / n;
            var / (mean * mean)
        };
        self.push(
            Tensor::scalar(value),
            vec![v],
            Box::new(move |g, _, inp| {
                let x = inp[0].data();
                let n = x.len() as f64;
                let mean = x.iter().sum::<f64>() / n;
                if mean == 0.0 {
                    return vec![Some(Tensor::zeros(inp[0].shape()))];
                }
                let sq = x.iter().map(|a| a * a).sum::<f64>() / n;
                let gv = g.item();
                vec![Some(Tensor::from_fn(inp[0].shape(), |i| {
                    gv * (2.0 * x[i] / (n * mean * mean) - 2.0 * sq / (n * mean * mean * mean))
                }))]
            }),
        )
    }
}
