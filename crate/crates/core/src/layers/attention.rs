use super::{Ctx, Linear};
use crate::config::{KERNEL_ATTENTION_EPS, MASK_VALUE, REL_BUCKETS, REL_MAX_DISTANCE};
use crate::error::{Error, Result};
use crate::params::{Init, Layout, ParamId};
use crate::tensor::{Float, Tensor, Var};

/// Bucket of `relative_position = key_pos - query_pos`: exact for short
/// distances, logarithmic up to `max_distance`, then saturated.
pub fn relative_bucket(relative_position: i64, bidirectional: bool, num_buckets: usize, max_distance: usize) -> usize {
    let mut buckets = num_buckets as i64;
    let mut ret = 0i64;
    let mut n = -relative_position;
    if bidirectional {
        buckets /= 2;
        if n < 0 {
            ret += buckets;
        }
        n = n.abs();
    } else {
        n = n.max(0);
    }
    let max_exact = buckets / 2;
    if n < max_exact {
        return (ret + n) as usize;
    }
    let log_ratio = (n as f64 / max_exact as f64).ln() / (max_distance as f64 / max_exact as f64).ln();
    let large = max_exact + (log_ratio * (buckets - max_exact) as f64) as i64;
    (ret + large.min(buckets - 1)) as usize
}

/// `[n × n]` additive mask hiding keys after the query position.
pub fn causal_mask<T: Float>(n: usize) -> Tensor<T> {
    let mut data = vec![T::zero(); n * n];
    for i in 0..n {
        for j in i + 1..n {
            data[i * n + j] = T::lit(MASK_VALUE);
        }
    }
    Tensor::new(vec![n, n], data).expect("square mask")
}

/// Learned per-head bias indexed by relative-position bucket; one table per stack.
#[derive(Clone, Debug)]
pub struct RelativeBias {
    pub table: ParamId,
    pub heads: usize,
    pub bidirectional: bool,
}

impl RelativeBias {
    pub fn new(layout: &mut Layout, name: &str, heads: usize, bidirectional: bool, component: &'static str) -> Self {
        RelativeBias { table: layout.add(name, &[REL_BUCKETS, heads], Init::Normal(2.0), component), heads, bidirectional }
    }

    /// Bias logits `[H, n_q, n_k]`.
    pub fn forward<T: Float>(&self, cx: &mut Ctx<'_, T>, n_q: usize, n_k: usize) -> Result<Var> {
        let mut buckets = Vec::with_capacity(n_q * n_k);
        for i in 0..n_q {
            for j in 0..n_k {
                let rel = j as i64 - i as i64;
                buckets.push(relative_bucket(rel, self.bidirectional, REL_BUCKETS, REL_MAX_DISTANCE));
            }
        }
        let t = cx.p(self.table);
        cx.g.rel_bias(t, &buckets, n_q, n_k)
    }
}

/// Multi-head scaled dot-product attention with optional additive bias.
#[derive(Clone, Debug)]
pub struct Attention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
    pub d_kv: usize,
}

impl Attention {
    pub fn new(layout: &mut Layout, prefix: &str, d_model: usize, heads: usize, d_kv: usize, component: &'static str) -> Self {
        let inner = heads * d_kv;
        Attention {
            q: Linear::new(layout, &format!("{prefix}.q"), d_model, inner, component),
            k: Linear::new(layout, &format!("{prefix}.k"), d_model, inner, component),
            v: Linear::new(layout, &format!("{prefix}.v"), d_model, inner, component),
            o: Linear::new(layout, &format!("{prefix}.o"), inner, d_model, component),
            heads,
            d_kv,
        }
    }

    pub fn forward<T: Float>(
        &self,
        cx: &mut Ctx<'_, T>,
        q_in: Var,
        kv_in: Var,
        bias: Option<Var>,
        causal: bool,
    ) -> Result<Var> {
        Ok(self.forward_with_weights(cx, q_in, kv_in, bias, causal)?.0)
    }

    /// Output plus the `[H, n_q, n_k]` attention weights.
    pub fn forward_with_weights<T: Float>(
        &self,
        cx: &mut Ctx<'_, T>,
        q_in: Var,
        kv_in: Var,
        bias: Option<Var>,
        causal: bool,
    ) -> Result<(Var, Var)> {
        if causal && q_in != kv_in {
            return Err(Error::contract("causal mask requested on cross-attention"));
        }
        let q = self.q.forward(cx, q_in)?;
        let k = self.k.forward(cx, kv_in)?;
        let v = self.v.forward(cx, kv_in)?;
        let s = cx.g.head_scores(q, k, self.heads)?;
        let mut s = cx.g.scale(s, 1.0 / (self.d_kv as f64).sqrt());
        if let Some(b) = bias {
            s = cx.g.add(s, b)?;
        }
        if causal {
            let n = cx.g.shape(q_in)[0];
            let mask = cx.g.constant(causal_mask(n));
            s = cx.g.add(s, mask)?;
        }
        let w = cx.g.softmax(s, 2)?;
        let ctx = cx.g.head_mix(w, v, self.heads)?;
        Ok((self.o.forward(cx, ctx)?, w))
    }
}

/// Linear-time attention with a ReLU feature map on queries and keys.
#[derive(Clone, Debug)]
pub struct KernelAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
}

impl KernelAttention {
    pub fn new(layout: &mut Layout, prefix: &str, d_model: usize, heads: usize, d_kv: usize, component: &'static str) -> Self {
        let inner = heads * d_kv;
        KernelAttention {
            q: Linear::new(layout, &format!("{prefix}.q"), d_model, inner, component),
            k: Linear::new(layout, &format!("{prefix}.k"), d_model, inner, component),
            v: Linear::new(layout, &format!("{prefix}.v"), d_model, inner, component),
            o: Linear::new(layout, &format!("{prefix}.o"), inner, d_model, component),
            heads,
        }
    }

    pub fn forward<T: Float>(&self, cx: &mut Ctx<'_, T>, q_in: Var, kv_in: Var, causal: bool) -> Result<Var> {
        let a = self.mix(cx, q_in, kv_in, causal)?;
        self.o.forward(cx, a)
    }

    /// Per-head mixture of values before the output projection, `[n × H·d_kv]`.
    pub fn mix<T: Float>(&self, cx: &mut Ctx<'_, T>, q_in: Var, kv_in: Var, causal: bool) -> Result<Var> {
        if causal && q_in != kv_in {
            return Err(Error::contract("causal mask requested on cross-attention"));
        }
        let q = self.q.forward(cx, q_in)?;
        let q = cx.g.relu(q);
        let k = self.k.forward(cx, kv_in)?;
        let k = cx.g.relu(k);
        let v = self.v.forward(cx, kv_in)?;
        cx.g.linear_attention(q, k, v, self.heads, causal, KERNEL_ATTENTION_EPS)
    }
}
