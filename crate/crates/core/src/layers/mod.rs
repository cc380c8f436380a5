//! Sequence-model building blocks. Each block declares its parameters into a
//! [`Layout`] at construction and runs forward on a [`Ctx`].

mod attention;
mod conv;
mod ffn;
mod mixer;
mod mos;

pub use attention::{causal_mask, relative_bucket, Attention, KernelAttention, RelativeBias};
pub use conv::{ConvBlock, ConvKernel, EtDecoderBranch, EtEncoderBranch, Glu};
pub use ffn::{Ffn, GluFfn, MoeFfn, MoeOutput, Routing};
pub use mixer::TokenMixer;
pub use mos::MosHead;

use crate::config::{Activation, NORM_EPS};
use crate::error::Result;
use crate::params::{Init, Layout, ParamId};
use crate::tensor::{Float, Graph, Tensor, Var};

/// Scope labels shared by the instrumentation and the closed-form cost model.
pub mod component {
    pub const EMBEDDING: &str = "embedding";
    pub const ENC_ATTENTION: &str = "encoder.attention";
    pub const ENC_FFN: &str = "encoder.ffn";
    pub const ENC_CONV: &str = "encoder.conv";
    pub const ENC_TOKEN_MIXING: &str = "encoder.token_mixing";
    pub const ENC_POOLING: &str = "encoder.pooling";
    pub const ENC_NORM: &str = "encoder.final_norm";
    pub const ENC_BIAS: &str = "encoder.relative_bias";
    pub const DEC_SELF_ATTENTION: &str = "decoder.self_attention";
    pub const DEC_CROSS_ATTENTION: &str = "decoder.cross_attention";
    pub const DEC_PARALLEL_ATTENTION: &str = "decoder.parallel_attention";
    pub const DEC_FFN: &str = "decoder.ffn";
    pub const DEC_CONV: &str = "decoder.conv";
    pub const DEC_NORM: &str = "decoder.final_norm";
    pub const DEC_BIAS: &str = "decoder.relative_bias";
    pub const SHARED_LAYER: &str = "shared_layer";
    pub const HEAD: &str = "head";
}

/// Forward-pass context: the tape plus the parameter values it binds.
pub struct Ctx<'a, T: Float> {
    pub g: &'a mut Graph<T>,
    pub params: &'a [Tensor<T>],
}

impl<'a, T: Float> Ctx<'a, T> {
    pub fn new(g: &'a mut Graph<T>, params: &'a [Tensor<T>]) -> Self {
        Ctx { g, params }
    }

    pub fn p(&mut self, id: ParamId) -> Var {
        self.g.param(id.0, &self.params[id.0])
    }

    pub fn act(&mut self, kind: Activation, x: Var) -> Var {
        match kind {
            Activation::Relu => self.g.relu(x),
            Activation::Gelu => self.g.gelu(x),
        }
    }
}

/// Bias-free `x · W` with `W: [d_in × d_out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new(layout: &mut Layout, name: &str, d_in: usize, d_out: usize, component: &'static str) -> Self {
        Linear { w: layout.weight(name, &[d_in, d_out], component), d_in, d_out }
    }

    pub fn forward<T: Float>(&self, cx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let w = cx.p(self.w);
        cx.g.matmul(x, w)
    }
}

/// Scale-only RMS normalization over the last axis.
#[derive(Clone, Debug)]
pub struct RmsNorm {
    pub scale: ParamId,
}

impl RmsNorm {
    pub fn new(layout: &mut Layout, name: &str, width: usize, component: &'static str) -> Self {
        RmsNorm { scale: layout.add(name, &[width], Init::Ones, component) }
    }

    pub fn forward<T: Float>(&self, cx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let s = cx.p(self.scale);
        cx.g.rms_norm(x, s, NORM_EPS)
    }
}

#[cfg(test)]
mod tests;
