use super::{Ctx, Linear};
use crate::error::Result;
use crate::params::{Init, Layout, ParamId};
use crate::tensor::{Float, Var};

/// Mixture-of-softmaxes output layer with its own `[V × d]` embedding.
///
/// `p = Σ_k π_k(h) · softmax(tanh(h·W_k)·Eᵀ / √d)`, `π = softmax(h·W_π)`.
/// The forward returns `log p`.
#[derive(Clone, Debug)]
pub struct MosHead {
    pub projections: Vec<Linear>,
    pub gate: Linear,
    pub embedding: ParamId,
    pub d_model: usize,
}

impl MosHead {
    pub fn new(layout: &mut Layout, prefix: &str, d_model: usize, vocab: usize, k: usize, component: &'static str) -> Self {
        let projections = (0..k).map(|i| Linear::new(layout, &format!("{prefix}.proj{i}"), d_model, d_model, component)).collect();
        let gate = Linear::new(layout, &format!("{prefix}.gate"), d_model, k, component);
        let embedding = layout.add(format!("{prefix}.embedding"), &[vocab, d_model], Init::Normal(0.3), component);
        MosHead { projections, gate, embedding, d_model }
    }

    /// Mixture probabilities `[n × V]`.
    pub fn probs<T: Float>(&self, cx: &mut Ctx<'_, T>, h: Var) -> Result<Var> {
        let g = self.gate.forward(cx, h)?;
        let pi = cx.g.softmax(g, 1)?;
        let emb = cx.p(self.embedding);
        let mut acc: Option<Var> = None;
        for (k, proj) in self.projections.iter().enumerate() {
            let c = proj.forward(cx, h)?;
            let c = cx.g.tanh(c);
            let c = cx.g.scale(c, 1.0 / (self.d_model as f64).sqrt());
            let logits = cx.g.matmul_t(c, emb)?;
            let p = cx.g.softmax(logits, 1)?;
            let w = cx.g.slice_cols(pi, k, 1)?;
            let term = cx.g.mul(w, p)?;
            acc = Some(match acc {
                None => term,
                Some(a) => cx.g.add(a, term)?,
            });
        }
        Ok(acc.expect("at least one mixture component"))
    }

    pub fn forward<T: Float>(&self, cx: &mut Ctx<'_, T>, h: Var) -> Result<Var> {
        let p = self.probs(cx, h)?;
        Ok(cx.g.log(p))
    }
}
