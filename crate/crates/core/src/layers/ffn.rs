use super::{Ctx, Linear};
use crate::config::{switch_capacity, Activation};
use crate::error::Result;
use crate::params::Layout;
use crate::tensor::{Float, Tensor, Var};

/// Position-wise `act(x·W_i)·W_o`.
#[derive(Clone, Debug)]
pub struct Ffn {
    pub wi: Linear,
    pub wo: Linear,
    pub act: Activation,
}

impl Ffn {
    pub fn new(layout: &mut Layout, prefix: &str, d_model: usize, d_ff: usize, act: Activation, component: &'static str) -> Self {
        Ffn {
            wi: Linear::new(layout, &format!("{prefix}.wi"), d_model, d_ff, component),
            wo: Linear::new(layout, &format!("{prefix}.wo"), d_ff, d_model, component),
            act,
        }
    }

    pub fn forward<T: Float>(&self, cx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let h = self.wi.forward(cx, x)?;
        let h = cx.act(self.act, h);
        self.wo.forward(cx, h)
    }
}

/// `(gelu(x·W) ⊙ (x·V))·W_o`.
#[derive(Clone, Debug)]
pub struct GluFfn {
    pub wi: Linear,
    pub wg: Linear,
    pub wo: Linear,
    /// Replace the linear gate branch by ones.
    pub unit_gate: bool,
}

impl GluFfn {
    pub fn new(layout: &mut Layout, prefix: &str, d_model: usize, d_ff: usize, component: &'static str) -> Self {
        GluFfn {
            wi: Linear::new(layout, &format!("{prefix}.wi"), d_model, d_ff, component),
            wg: Linear::new(layout, &format!("{prefix}.wg"), d_model, d_ff, component),
            wo: Linear::new(layout, &format!("{prefix}.wo"), d_ff, d_model, component),
            unit_gate: false,
        }
    }

    pub fn forward<T: Float>(&self, cx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let h = self.wi.forward(cx, x)?;
        let h = cx.g.gelu(h);
        let gate = if self.unit_gate {
            let shape = cx.g.shape(h).to_vec();
            cx.g.constant(Tensor::ones(shape))
        } else {
            self.wg.forward(cx, x)?
        };
        let h = cx.g.mul(h, gate)?;
        self.wo.forward(cx, h)
    }
}

/// Token-to-expert assignment of one MoE call.
#[derive(Clone, Debug, PartialEq)]
pub struct Routing {
    /// Top-1 expert per token (ties go to the lowest index).
    pub expert: Vec<usize>,
    /// False for tokens dropped because their expert was full.
    pub kept: Vec<bool>,
    pub capacity: usize,
    /// Tokens routed to each expert before capacity is applied.
    pub routed: Vec<usize>,
}

pub struct MoeOutput {
    pub out: Var,
    /// Unweighted load-balancing loss `N_E · Σ f_i · P_i`.
    pub aux: Var,
    pub routing: Routing,
}

/// Top-1 switch layer with fixed-capacity expert buffers.
///
/// Every expert processes a zero-padded `[capacity × d]` buffer, so the
/// multiply count depends only on shapes. Dropped tokens produce zero rows.
#[derive(Clone, Debug)]
pub struct MoeFfn {
    pub router: Linear,
    pub experts: Vec<Ffn>,
    pub capacity_factor: f64,
}

impl MoeFfn {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        layout: &mut Layout,
        prefix: &str,
        d_model: usize,
        d_ff: usize,
        n_experts: usize,
        capacity_factor: f64,
        act: Activation,
        component: &'static str,
    ) -> Self {
        let router = Linear::new(layout, &format!("{prefix}.router"), d_model, n_experts, component);
        let experts = (0..n_experts)
            .map(|e| Ffn::new(layout, &format!("{prefix}.expert{e}"), d_model, d_ff, act, component))
            .collect();
        MoeFfn { router, experts, capacity_factor }
    }

    pub fn forward<T: Float>(&self, cx: &mut Ctx<'_, T>, x: Var) -> Result<MoeOutput> {
        let n = cx.g.shape(x)[0];
        let n_exp = self.experts.len();
        let logits = self.router.forward(cx, x)?;
        let probs = cx.g.softmax(logits, 1)?;
        let capacity = switch_capacity(self.capacity_factor, n, n_exp);

        let pv = cx.g.value(probs).data().to_vec();
        let mut expert = Vec::with_capacity(n);
        let mut kept = Vec::with_capacity(n);
        let mut routed = vec![0usize; n_exp];
        let mut slots: Vec<Option<usize>> = vec![None; n_exp * capacity];
        for t in 0..n {
            let row = &pv[t * n_exp..(t + 1) * n_exp];
            let mut best = 0;
            for e in 1..n_exp {
                if row[e] > row[best] {
                    best = e;
                }
            }
            expert.push(best);
            if routed[best] < capacity {
                slots[best * capacity + routed[best]] = Some(t);
                kept.push(true);
            } else {
                kept.push(false);
            }
            routed[best] += 1;
        }

        let mut outs = Vec::with_capacity(n_exp);
        for (e, ffn) in self.experts.iter().enumerate() {
            let buf = cx.g.gather_rows(x, &slots[e * capacity..(e + 1) * capacity])?;
            outs.push(ffn.forward(cx, buf)?);
        }
        let stacked = cx.g.concat_rows(&outs)?;
        let combined = cx.g.scatter_rows(stacked, &slots, n)?;

        let flat = cx.g.reshape(probs, &[n * n_exp, 1])?;
        let picks: Vec<Option<usize>> = expert.iter().enumerate().map(|(t, &e)| Some(t * n_exp + e)).collect();
        let gate = cx.g.gather_rows(flat, &picks)?;
        let out = cx.g.mul(combined, gate)?;

        // N_E · Σ_i f_i · P_i = Σ_i (Σ_t p_ti) · (N_E · routed_i / n²)
        let col_sums = cx.g.sum_axis(probs, 0)?;
        let scale = n_exp as f64 / (n as f64 * n as f64);
        let weights: Vec<f64> = routed.iter().map(|&r| r as f64 * scale).collect();
        let w = cx.g.constant(Tensor::from_f64(vec![n_exp], &weights)?);
        let prod = cx.g.mul(col_sums, w)?;
        let aux = cx.g.sum_all(prod);

        Ok(MoeOutput { out, aux, routing: Routing { expert, kept, capacity, routed } })
    }
}
