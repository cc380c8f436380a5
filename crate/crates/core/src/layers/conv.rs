use super::{Ctx, Linear, RmsNorm};
use crate::error::Result;
use crate::params::{Init, Layout, ParamId};
use crate::tensor::{Float, Padding, Var};

/// `a ⊙ σ(b)` where `[a | b] = x·W`, `W: [d_in × 2·d_out]`.
#[derive(Clone, Debug)]
pub struct Glu {
    pub proj: Linear,
}

impl Glu {
    pub fn new(layout: &mut Layout, name: &str, d_in: usize, d_out: usize, component: &'static str) -> Self {
        Glu { proj: Linear::new(layout, name, d_in, 2 * d_out, component) }
    }

    pub fn forward<T: Float>(&self, cx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let half = self.proj.d_out / 2;
        let h = self.proj.forward(cx, x)?;
        let a = cx.g.slice_cols(h, 0, half)?;
        let b = cx.g.slice_cols(h, half, half)?;
        let b = cx.g.sigmoid(b);
        cx.g.mul(a, b)
    }
}

#[derive(Clone, Debug)]
pub enum ConvKernel {
    /// Learned `[groups × width]` logits shared over positions.
    Static(ParamId),
    /// Per-position logits predicted from the conv input, `d → groups·width`.
    Dynamic(Linear),
}

/// GLU input projection, softmax-normalized grouped depthwise convolution,
/// output projection.
#[derive(Clone, Debug)]
pub struct ConvBlock {
    pub glu: Glu,
    pub kernel: ConvKernel,
    pub out: Linear,
    pub groups: usize,
    pub width: usize,
}

impl ConvBlock {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        layout: &mut Layout,
        prefix: &str,
        d_model: usize,
        groups: usize,
        width: usize,
        dynamic: bool,
        component: &'static str,
    ) -> Self {
        let glu = Glu::new(layout, &format!("{prefix}.glu"), d_model, d_model, component);
        let kernel = if dynamic {
            ConvKernel::Dynamic(Linear::new(layout, &format!("{prefix}.kernel_proj"), d_model, groups * width, component))
        } else {
            ConvKernel::Static(layout.add(format!("{prefix}.kernel"), &[groups, width], Init::Normal(0.5), component))
        };
        let out = Linear::new(layout, &format!("{prefix}.out"), d_model, d_model, component);
        ConvBlock { glu, kernel, out, groups, width }
    }

    /// Normalized kernel: `[groups × width]` or `[n × groups × width]`.
    pub fn kernel_weights<T: Float>(&self, cx: &mut Ctx<'_, T>, u: Var) -> Result<Var> {
        match &self.kernel {
            ConvKernel::Static(id) => {
                let k = cx.p(*id);
                cx.g.softmax(k, 1)
            }
            ConvKernel::Dynamic(proj) => {
                let n = cx.g.shape(u)[0];
                let k = proj.forward(cx, u)?;
                let k = cx.g.reshape(k, &[n, self.groups, self.width])?;
                cx.g.softmax(k, 2)
            }
        }
    }

    pub fn forward<T: Float>(&self, cx: &mut Ctx<'_, T>, x: Var, padding: Padding) -> Result<Var> {
        let u = self.glu.forward(cx, x)?;
        let k = self.kernel_weights(cx, u)?;
        let y = cx.g.depthwise_conv1d(u, k, padding)?;
        self.out.forward(cx, y)
    }
}

/// Per-channel depthwise conv (unnormalized) followed by a pointwise projection.
#[derive(Clone, Debug)]
pub struct SepConv {
    pub depthwise: ParamId,
    pub pointwise: Linear,
}

impl SepConv {
    pub fn new(layout: &mut Layout, prefix: &str, d_in: usize, d_out: usize, width: usize, component: &'static str) -> Self {
        let std = 1.0 / (width as f64).sqrt();
        SepConv {
            depthwise: layout.add(format!("{prefix}.depthwise"), &[d_in, width], Init::Normal(std), component),
            pointwise: Linear::new(layout, &format!("{prefix}.pointwise"), d_in, d_out, component),
        }
    }

    pub fn forward<T: Float>(&self, cx: &mut Ctx<'_, T>, x: Var, padding: Padding) -> Result<Var> {
        let k = cx.p(self.depthwise);
        let y = cx.g.depthwise_conv1d(x, k, padding)?;
        self.pointwise.forward(cx, y)
    }
}

/// Evolved encoder branch: `relu(x·W_l) + pad(relu(conv3(x)))`, norm,
/// separable width-9 conv down to `d/2`, zero-padded back to `d`.
#[derive(Clone, Debug)]
pub struct EtEncoderBranch {
    pub left: Linear,
    pub right: ParamId,
    pub mid_norm: RmsNorm,
    pub sep: SepConv,
    pub d_model: usize,
    pub d_ff: usize,
}

impl EtEncoderBranch {
    pub fn new(layout: &mut Layout, prefix: &str, d_model: usize, d_ff: usize, component: &'static str) -> Self {
        let half = d_model / 2;
        EtEncoderBranch {
            left: Linear::new(layout, &format!("{prefix}.left"), d_model, d_ff, component),
            right: layout.add(
                format!("{prefix}.right_conv3"),
                &[3, d_model, half],
                Init::Normal(1.0 / ((3 * d_model) as f64).sqrt()),
                component,
            ),
            mid_norm: RmsNorm::new(layout, &format!("{prefix}.mid_norm"), d_ff, component),
            sep: SepConv::new(layout, &format!("{prefix}.sep9"), d_ff, half, 9, component),
            d_model,
            d_ff,
        }
    }

    pub fn forward<T: Float>(&self, cx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let l = self.left.forward(cx, x)?;
        let l = cx.g.relu(l);
        let w = cx.p(self.right);
        let r = cx.g.conv1d(x, w, Padding::Same)?;
        let r = cx.g.relu(r);
        let r = cx.g.pad_cols(r, self.d_ff)?;
        let s = cx.g.add(l, r)?;
        let s = self.mid_norm.forward(cx, s)?;
        let s = self.sep.forward(cx, s, Padding::Same)?;
        cx.g.pad_cols(s, self.d_model)
    }
}

/// Evolved decoder branch: `relu(sep11(x)) + pad(sep7(x))`, norm, `sep7` back
/// to `d`. All convolutions are causal.
#[derive(Clone, Debug)]
pub struct EtDecoderBranch {
    pub left: SepConv,
    pub right: SepConv,
    pub mid_norm: RmsNorm,
    pub out: SepConv,
    pub d_ff: usize,
}

impl EtDecoderBranch {
    pub fn new(layout: &mut Layout, prefix: &str, d_model: usize, d_ff: usize, component: &'static str) -> Self {
        EtDecoderBranch {
            left: SepConv::new(layout, &format!("{prefix}.sep11"), d_model, d_ff, 11, component),
            right: SepConv::new(layout, &format!("{prefix}.sep7_right"), d_model, d_model / 2, 7, component),
            mid_norm: RmsNorm::new(layout, &format!("{prefix}.mid_norm"), d_ff, component),
            out: SepConv::new(layout, &format!("{prefix}.sep7_out"), d_ff, d_model, 7, component),
            d_ff,
        }
    }

    pub fn forward<T: Float>(&self, cx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let l = self.left.forward(cx, x, Padding::Causal)?;
        let l = cx.g.relu(l);
        let r = self.right.forward(cx, x, Padding::Causal)?;
        let r = cx.g.pad_cols(r, self.d_ff)?;
        let s = cx.g.add(l, r)?;
        let s = self.mid_norm.forward(cx, s)?;
        self.out.forward(cx, s, Padding::Causal)
    }
}
