use super::{Ctx, Linear};
use crate::error::{Error, Result};
use crate::params::Layout;
use crate::tensor::{Float, Var};

/// Token-mixing MLP applied across positions of a fixed-length sequence:
/// `(gelu(xᵀ·W_1)·W_2)ᵀ`.
#[derive(Clone, Debug)]
pub struct TokenMixer {
    pub w1: Linear,
    pub w2: Linear,
    pub n_fixed: usize,
}

impl TokenMixer {
    pub fn new(layout: &mut Layout, prefix: &str, n_fixed: usize, hidden: usize, component: &'static str) -> Self {
        TokenMixer {
            w1: Linear::new(layout, &format!("{prefix}.token_w1"), n_fixed, hidden, component),
            w2: Linear::new(layout, &format!("{prefix}.token_w2"), hidden, n_fixed, component),
            n_fixed,
        }
    }

    pub fn forward<T: Float>(&self, cx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let n = cx.g.shape(x)[0];
        if n != self.n_fixed {
            return Err(Error::contract(format!(
                "token mixer needs exactly {} positions, got {} (pad upstream)",
                self.n_fixed, n
            )));
        }
        let xt = cx.g.transpose(x)?;
        let h = self.w1.forward(cx, xt)?;
        let h = cx.g.gelu(h);
        let y = self.w2.forward(cx, h)?;
        cx.g.transpose(y)
    }
}
