//! Noise-extraction convolutions: trainable high-pass (HF), fixed SRM
//! residual filters, constrained Bayar filters and central-difference (CD)
//! convolution. All of them map `Ch×h×w` to `Ch×h×w`.

use std::fmt;

use crate::autograd::{ConvSpec, Graph, Var};
use crate::error::{Error, Result};
use crate::params::{Ctx, Init, ParamId, ParamStore};
use crate::tensor::Tensor;

pub const HF_KERNEL: usize = 3;
pub const SRM_KERNEL: usize = 5;
pub const BAYAR_KERNEL: usize = 5;
pub const CD_KERNEL: usize = 3;
pub const DEFAULT_THETA: f64 = 0.7;

/// Relative slack below which a kernel already counts as constrained, so
/// projections are exactly idempotent despite rounding.
const PROJECTION_SLACK: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ExpertKind {
    Hf,
    Srm,
    Bayar,
    Cd,
}

impl ExpertKind {
    /// Gate order of the routed experts.
    pub const ALL: [ExpertKind; 4] = [ExpertKind::Hf, ExpertKind::Srm, ExpertKind::Bayar, ExpertKind::Cd];

    pub fn kernel_size(self) -> usize {
        match self {
            ExpertKind::Hf => HF_KERNEL,
            ExpertKind::Srm => SRM_KERNEL,
            ExpertKind::Bayar => BAYAR_KERNEL,
            ExpertKind::Cd => CD_KERNEL,
        }
    }

    pub fn trainable(self) -> bool {
        self != ExpertKind::Srm
    }
}

impl fmt::Display for ExpertKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ExpertKind::Hf => "hf",
            ExpertKind::Srm => "srm",
            ExpertKind::Bayar => "bayar",
            ExpertKind::Cd => "cd",
        })
    }
}

/// The three canonical 5×5 SRM residual filters, in the order
/// (second-order "KB" 3×3, "KV" 5×5, horizontal second-order).
pub fn srm_base_kernels() -> [[f64; 25]; 3] {
    #[rustfmt::skip]
    let kb = [
        0.0, 0.0, 0.0, 0.0, 0.0,
        0.0, -1.0, 2.0, -1.0, 0.0,
        0.0, 2.0, -4.0, 2.0, 0.0,
        0.0, -1.0, 2.0, -1.0, 0.0,
        0.0, 0.0, 0.0, 0.0, 0.0,
    ];
    #[rustfmt::skip]
    let kv = [
        -1.0, 2.0, -2.0, 2.0, -1.0,
        2.0, -6.0, 8.0, -6.0, 2.0,
        -2.0, 8.0, -12.0, 8.0, -2.0,
        2.0, -6.0, 8.0, -6.0, 2.0,
        -1.0, 2.0, -2.0, 2.0, -1.0,
    ];
    #[rustfmt::skip]
    let h2 = [
        0.0, 0.0, 0.0, 0.0, 0.0,
        0.0, 0.0, 0.0, 0.0, 0.0,
        0.0, 1.0, -2.0, 1.0, 0.0,
        0.0, 0.0, 0.0, 0.0, 0.0,
        0.0, 0.0, 0.0, 0.0, 0.0,
    ];
    [kb.map(|v| v / 4.0), kv.map(|v| v / 12.0), h2.map(|v| v / 2.0)]
}

/// Depthwise SRM bank `Ch×1×5×5`: channel `c` uses base kernel `c mod 3`.
pub fn srm_kernels(channels: usize) -> Tensor {
    let base = srm_base_kernels();
    Tensor::from_fn(&[channels, 1, SRM_KERNEL, SRM_KERNEL], |i| base[(i / 25) % 3][i % 25])
}

fn check_channels(op: &'static str, g: &Graph, x: Var, kernels: Var, depthwise: bool) -> Result<()> {
    let xs = g.shape(x);
    let ks = g.shape(kernels);
    if xs.len() != 3 || ks.len() != 4 {
        return Err(Error::shape(op, format!("input {:?}, kernels {:?}", xs, ks)));
    }
    let expected_in = if depthwise { 1 } else { xs[0] };
    if ks[0] != xs[0] || ks[1] != expected_in {
        return Err(Error::shape(
            op,
            format!("channel mismatch: input has {} channels, kernels {:?}", xs[0], ks),
        ));
    }
    Ok(())
}

/// Fixed SRM residuals, applied depthwise with zero "same" padding.
pub fn srm_conv(g: &mut Graph, x: Var, kernels: Var) -> Result<Var> {
    check_channels("srm_conv", g, x, kernels, true)?;
    let ch = g.shape(x)[0];
    Ok(g.conv2d(x, kernels, ConvSpec::depthwise(SRM_KERNEL, ch)))
}

/// Constrained 5×5 convolution, full `Ch -> Ch`.
pub fn bayar_conv(g: &mut Graph, x: Var, kernels: Var) -> Result<Var> {
    check_channels("bayar_conv", g, x, kernels, false)?;
    Ok(g.conv2d(x, kernels, ConvSpec::same(BAYAR_KERNEL)))
}

/// Zero-sum 3×3 high-pass convolution, full `Ch -> Ch`.
pub fn hf_conv(g: &mut Graph, x: Var, kernels: Var) -> Result<Var> {
    check_channels("hf_conv", g, x, kernels, false)?;
    Ok(g.conv2d(x, kernels, ConvSpec::same(HF_KERNEL)))
}

/// Central-difference convolution:
/// `y(p) = sum_w k(w) x(p + w) - theta * x(p) * sum_w k(w)`, per input channel.
pub fn cd_conv(g: &mut Graph, x: Var, kernels: Var, theta: f64) -> Result<Var> {
    if !(0.0..=1.0).contains(&theta) {
        return Err(Error::InvalidParam {
            name: "theta".into(),
            detail: format!("must lie in [0, 1], got {theta}"),
        });
    }
    check_channels("cd_conv", g, x, kernels, false)?;
    let k = g.shape(kernels)[2];
    let vanilla = g.conv2d(x, kernels, ConvSpec::same(k));
    if theta == 0.0 {
        return Ok(vanilla);
    }
    let ksum = g.kernel_spatial_sum(kernels);
    let center = g.conv2d(x, ksum, ConvSpec::same(1));
    let center = g.scale(center, theta);
    Ok(g.sub(vanilla, center))
}

/// Projects every `k×k` slice onto the Bayar constraint: centre `-1`,
/// non-centre weights summing to `1`. Slices whose non-centre weights sum to
/// zero are reset to the uniform kernel. Returns how many were reset.
pub fn bayar_project(kernels: &mut Tensor) -> usize {
    let s = kernels.shape().to_vec();
    let kk = s[2] * s[3];
    let centre = (s[2] / 2) * s[3] + s[3] / 2;
    let mut resets = 0;
    for slice in kernels.data_mut().chunks_mut(kk) {
        let sum: f64 = slice.iter().enumerate().filter(|(i, _)| *i != centre).map(|(_, v)| v).sum();
        let mass: f64 = slice.iter().enumerate().filter(|(i, _)| *i != centre).map(|(_, v)| v.abs()).sum();
        if slice[centre] == -1.0 && (sum - 1.0).abs() <= PROJECTION_SLACK * mass.max(1.0) {
            continue;
        }
        if sum == 0.0 || !sum.is_finite() {
            let u = 1.0 / (kk - 1) as f64;
            slice.iter_mut().for_each(|v| *v = u);
            resets += 1;
        } else {
            slice.iter_mut().for_each(|v| *v /= sum);
        }
        slice[centre] = -1.0;
    }
    resets
}

/// Subtracts each `k×k` slice's mean so every slice sums to zero.
pub fn hf_project(kernels: &mut Tensor) {
    let s = kernels.shape().to_vec();
    let kk = s[2] * s[3];
    for slice in kernels.data_mut().chunks_mut(kk) {
        let sum: f64 = slice.iter().sum();
        let scale: f64 = slice.iter().map(|v| v.abs()).sum::<f64>().max(1.0);
        if sum.abs() <= PROJECTION_SLACK * scale {
            continue;
        }
        let mean = sum / kk as f64;
        slice.iter_mut().for_each(|v| *v -= mean);
    }
}

/// Discrete Laplacian `[[0,1,0],[1,-4,1],[0,1,0]]` on the diagonal
/// `(c, c)` slices of a `Ch×Ch×3×3` bank, zeros elsewhere.
pub fn laplacian_kernels(channels: usize) -> Tensor {
    let lap = [0.0, 1.0, 0.0, 1.0, -4.0, 1.0, 0.0, 1.0, 0.0];
    Tensor::from_fn(&[channels, channels, 3, 3], |i| {
        let (o, c) = (i / (channels * 9), (i / 9) % channels);
        if o == c {
            lap[i % 9]
        } else {
            0.0
        }
    })
}

/// One noise expert bound to its kernel parameter.
#[derive(Clone, Debug)]
pub struct NoiseExpert {
    pub kind: ExpertKind,
    pub kernels: ParamId,
    pub theta: f64,
}

impl NoiseExpert {
    pub fn new(store: &mut ParamStore, init: &mut Init, name: &str, kind: ExpertKind, channels: usize, theta: f64) -> Self {
        let k = kind.kernel_size();
        let kernels = match kind {
            ExpertKind::Srm => srm_kernels(channels),
            ExpertKind::Hf => {
                let mut t = init.fan_in(&[channels, channels, k, k], channels * k * k, 1.0);
                hf_project(&mut t);
                t
            }
            ExpertKind::Bayar => {
                let mut t = init.uniform(&[channels, channels, k, k], 0.0, 1.0);
                bayar_project(&mut t);
                t
            }
            ExpertKind::Cd => init.fan_in(&[channels, channels, k, k], channels * k * k, 1.0),
        };
        let id = store.add(format!("{name}.{kind}.kernels"), kernels, kind.trainable());
        NoiseExpert { kind, kernels: id, theta }
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        let k = ctx.param(self.kernels);
        match self.kind {
            ExpertKind::Hf => hf_conv(&mut ctx.graph, x, k),
            ExpertKind::Srm => srm_conv(&mut ctx.graph, x, k),
            ExpertKind::Bayar => bayar_conv(&mut ctx.graph, x, k),
            ExpertKind::Cd => cd_conv(&mut ctx.graph, x, k, self.theta),
        }
    }

    /// Re-imposes the kernel constraint after an optimizer step. Returns
    /// the number of degenerate Bayar kernels that were reset.
    pub fn project(&self, store: &mut ParamStore) -> usize {
        match self.kind {
            ExpertKind::Bayar => bayar_project(store.get_mut(self.kernels)),
            ExpertKind::Hf => {
                hf_project(store.get_mut(self.kernels));
                0
            }
            ExpertKind::Srm | ExpertKind::Cd => 0,
        }
    }
}
