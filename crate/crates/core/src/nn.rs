//! Small layer wrappers over graph ops.

use crate::autograd::{ConvSpec, Var};
use crate::params::{Ctx, Init, ParamId, ParamStore};
use crate::tensor::Tensor;

/// Affine map applied to the rows of an `n×in` node. Weight is `out×in`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(store: &mut ParamStore, init: &mut Init, name: &str, in_dim: usize, out_dim: usize) -> Self {
        let weight = store.add(format!("{name}.weight"), init.fan_in(&[out_dim, in_dim], in_dim, 1.0), true);
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[out_dim]), true);
        Linear { weight, bias, in_dim, out_dim }
    }

    pub fn zeros(store: &mut ParamStore, name: &str, in_dim: usize, out_dim: usize) -> Self {
        let weight = store.add(format!("{name}.weight"), Tensor::zeros(&[out_dim, in_dim]), true);
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[out_dim]), true);
        Linear { weight, bias, in_dim, out_dim }
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Var {
        let w = ctx.param(self.weight);
        let b = ctx.param(self.bias);
        let y = ctx.graph.matmul_t(x, w, false, true);
        ctx.graph.add_row_bias(y, b)
    }
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub spec: ConvSpec,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        init: &mut Init,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        spec: ConvSpec,
        bias: bool,
    ) -> Self {
        let fan_in = cin / spec.groups * kernel * kernel;
        let weight = store.add(
            format!("{name}.weight"),
            init.fan_in(&[cout, cin / spec.groups, kernel, kernel], fan_in, 1.0),
            true,
        );
        let bias = bias.then(|| store.add(format!("{name}.bias"), Tensor::zeros(&[cout]), true));
        Conv2d { weight, bias, spec }
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Var {
        let w = ctx.param(self.weight);
        let y = ctx.graph.conv2d(x, w, self.spec);
        match self.bias {
            Some(b) => {
                let b = ctx.param(b);
                ctx.graph.add_channel_bias(y, b)
            }
            None => y,
        }
    }
}

/// Layer normalisation over the last axis of an `n×d` node.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

pub const LN_EPS: f64 = 1e-5;

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        let gamma = store.add(format!("{name}.gamma"), Tensor::full(&[dim], 1.0), true);
        let beta = store.add(format!("{name}.beta"), Tensor::zeros(&[dim]), true);
        LayerNorm { gamma, beta }
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Var {
        let g = ctx.param(self.gamma);
        let b = ctx.param(self.beta);
        ctx.graph.layer_norm_rows(x, g, b, LN_EPS)
    }

    /// Normalises each pixel of a `C×H×W` map across its channels.
    pub fn forward_channels(&self, ctx: &mut Ctx, x: Var) -> Var {
        let s = ctx.graph.shape(x).to_vec();
        let flat = ctx.graph.reshape(x, &[s[0], s[1] * s[2]]);
        let rows = ctx.graph.transpose(flat);
        let n = self.forward(ctx, rows);
        let back = ctx.graph.transpose(n);
        ctx.graph.reshape(back, &s)
    }
}

/// Two-layer perceptron with GELU: `in -> hidden -> out`.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new(store: &mut ParamStore, init: &mut Init, name: &str, dims: (usize, usize, usize)) -> Self {
        Mlp {
            fc1: Linear::new(store, init, &format!("{name}.fc1"), dims.0, dims.1),
            fc2: Linear::new(store, init, &format!("{name}.fc2"), dims.1, dims.2),
        }
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Var {
        let h = self.fc1.forward(ctx, x);
        let h = ctx.graph.gelu(h);
        self.fc2.forward(ctx, h)
    }
}

/// `C×H×W` map to `HW×C` rows.
pub fn map_to_rows(ctx: &mut Ctx, x: Var) -> Var {
    let s = ctx.graph.shape(x).to_vec();
    let flat = ctx.graph.reshape(x, &[s[0], s[1] * s[2]]);
    ctx.graph.transpose(flat)
}

/// `HW×C` rows back to a `C×H×W` map.
pub fn rows_to_map(ctx: &mut Ctx, x: Var, h: usize, w: usize) -> Var {
    let c = ctx.graph.shape(x)[1];
    let t = ctx.graph.transpose(x);
    ctx.graph.reshape(t, &[c, h, w])
}
