//! Complete encoder-decoder models for every [`Family`].
//!
//! Every stack is a list of pre-norm residual steps followed by a final norm.
//! Parameter sharing reuses the same [`ParamId`]s across steps.

mod checkpoint;
mod gradcheck;

pub use checkpoint::{read_checkpoint, write_checkpoint, Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use gradcheck::{gradcheck, tiny_config, GradcheckOptions, GradcheckReport};

use std::collections::BTreeMap;

use crate::config::{Activation, Family, ModelConfig, SWITCH_AUX_WEIGHT};
use crate::error::{Error, Result};
use crate::layers::component as comp;
use crate::layers::{
    Attention, ConvBlock, Ctx, EtDecoderBranch, EtEncoderBranch, Ffn, Glu, GluFfn, KernelAttention, Linear, MoeFfn,
    MosHead, RelativeBias, RmsNorm, TokenMixer,
};
use crate::params::{Init, Layout, ParamId};
use crate::tensor::{Float, Graph, Padding, Tensor, Var};

/// Init std of token and position tables.
pub const EMBED_STD: f64 = 0.3;

#[derive(Clone, Debug)]
pub enum FfnKind {
    Dense(Ffn),
    Glu(GluFfn),
    Moe(MoeFfn),
}

#[derive(Clone, Debug)]
pub enum Body {
    SelfAttn { attn: Attention, causal: bool },
    CrossAttn(Attention),
    KernelSelf { attn: KernelAttention, causal: bool },
    KernelCross(KernelAttention),
    Ffn(FfnKind),
    Conv { block: ConvBlock, padding: Padding },
    TokenMix(TokenMixer),
    Glu(Glu),
    EtEncBranch(EtEncoderBranch),
    EtDecBranch(EtDecoderBranch),
    /// Causal self-attention and cross-attention on the same input, summed.
    ParallelAttn { self_attn: Attention, cross: Attention },
    /// Stride-2 mean pool; replaces the residual stream instead of adding to it.
    Pool,
}

/// `x + body(norm(x))`, charged to `scope`.
#[derive(Clone, Debug)]
pub struct Step {
    pub norm: Option<RmsNorm>,
    pub body: Body,
    pub scope: &'static str,
}

#[derive(Clone, Debug)]
pub struct Stack {
    pub steps: Vec<Step>,
    pub final_norm: RmsNorm,
    /// Shared by every biased self-attention in the stack.
    pub bias: Option<RelativeBias>,
    pub norm_scope: &'static str,
    pub bias_scope: &'static str,
}

#[derive(Clone, Debug)]
pub struct Embedding {
    pub table: ParamId,
    /// Factorized input: `[V × E]` table followed by `E → d`.
    pub proj: Option<Linear>,
    /// Learned absolute positions for the encoder and decoder.
    pub positions: Option<(ParamId, ParamId)>,
}

#[derive(Clone, Debug)]
pub enum Head {
    /// `(h / √d) · Eᵀ` with the input table.
    Tied,
    /// `((h · P) / √E) · Tᵀ` with its own `[V × E]` table.
    Factorized { proj: Linear, table: ParamId, width: usize },
    Mos(MosHead),
}

/// Wiring and parameter layout of one model; holds no values.
#[derive(Clone, Debug)]
pub struct Architecture {
    pub config: ModelConfig,
    pub layout: Layout,
    pub embedding: Embedding,
    pub encoder: Stack,
    pub decoder: Stack,
    pub head: Head,
}

/// Result of one forward pass.
pub struct Forward {
    /// `[n_dec × V]` logits; log-probabilities for the mixture-of-softmaxes head.
    pub logits: Var,
    /// One load-balancing term per mixture-of-experts call.
    pub aux: Vec<Var>,
    pub enc_out_len: usize,
}

pub struct Loss {
    /// Cross-entropy plus weighted load-balancing terms.
    pub total: Var,
    pub cross_entropy: Var,
    pub forward: Forward,
}

fn repeat(steps: &[Step], times: usize) -> Vec<Step> {
    (0..times).flat_map(|_| steps.iter().cloned()).collect()
}

struct Builder<'a> {
    c: &'a ModelConfig,
    l: Layout,
}

impl Builder<'_> {
    fn norm(&mut self, name: &str, pc: &'static str) -> RmsNorm {
        RmsNorm::new(&mut self.l, name, self.c.d_model, pc)
    }

    fn attention(&mut self, prefix: &str, pc: &'static str) -> Attention {
        Attention::new(&mut self.l, prefix, self.c.d_model, self.c.n_heads, self.c.d_kv, pc)
    }

    fn kernel_attention(&mut self, prefix: &str, pc: &'static str) -> KernelAttention {
        KernelAttention::new(&mut self.l, prefix, self.c.d_model, self.c.n_heads, self.c.d_kv, pc)
    }

    fn step(&mut self, prefix: &str, body: Body, scope: &'static str, pc: &'static str) -> Step {
        let norm = Some(self.norm(&format!("{prefix}.norm"), pc));
        Step { norm, body, scope }
    }

    fn self_attn_step(&mut self, prefix: &str, causal: bool, scope: &'static str, pc: &'static str) -> Step {
        let p = format!("{prefix}.self_attn");
        let body = if self.c.family == Family::Performer {
            Body::KernelSelf { attn: self.kernel_attention(&p, pc), causal }
        } else {
            Body::SelfAttn { attn: self.attention(&p, pc), causal }
        };
        self.step(&p, body, scope, pc)
    }

    fn cross_attn_step(&mut self, prefix: &str, pc: &'static str) -> Step {
        let p = format!("{prefix}.cross_attn");
        let body = if self.c.family == Family::Performer {
            Body::KernelCross(self.kernel_attention(&p, pc))
        } else {
            Body::CrossAttn(self.attention(&p, pc))
        };
        self.step(&p, body, comp::DEC_CROSS_ATTENTION, pc)
    }

    fn ffn_step(&mut self, prefix: &str, layer: usize, scope: &'static str, pc: &'static str) -> Step {
        let c = self.c;
        let p = format!("{prefix}.ffn");
        let kind = if c.family == Family::Glu {
            FfnKind::Glu(GluFfn::new(&mut self.l, &p, c.d_model, c.d_ff, pc))
        } else if c.is_moe_layer(layer) {
            FfnKind::Moe(MoeFfn::new(
                &mut self.l,
                &p,
                c.d_model,
                c.d_ff,
                c.n_experts,
                c.capacity_factor,
                c.ffn_activation,
                pc,
            ))
        } else {
            let act = if c.family == Family::Mixer && scope == comp::ENC_FFN { Activation::Gelu } else { c.ffn_activation };
            FfnKind::Dense(Ffn::new(&mut self.l, &p, c.d_model, c.d_ff, act, pc))
        };
        self.step(&p, Body::Ffn(kind), scope, pc)
    }

    fn conv_step(&mut self, prefix: &str, padding: Padding, scope: &'static str) -> Step {
        let c = self.c;
        let p = format!("{prefix}.conv");
        let block =
            ConvBlock::new(&mut self.l, &p, c.d_model, c.n_heads, c.kernel_width, c.family == Family::DConv, scope);
        self.step(&p, Body::Conv { block, padding }, scope, scope)
    }

    fn encoder_layer(&mut self, prefix: &str, i: usize) -> Vec<Step> {
        let c = self.c;
        let mut steps = Vec::new();
        match c.family {
            Family::Evolved => {
                let p = format!("{prefix}.glu");
                let glu = Glu::new(&mut self.l, &format!("{p}.proj"), c.d_model, c.d_model, comp::ENC_FFN);
                steps.push(self.step(&p, Body::Glu(glu), comp::ENC_FFN, comp::ENC_FFN));
                let p = format!("{prefix}.branch");
                let br = EtEncoderBranch::new(&mut self.l, &p, c.d_model, c.d_ff, comp::ENC_CONV);
                steps.push(self.step(&p, Body::EtEncBranch(br), comp::ENC_CONV, comp::ENC_CONV));
                steps.push(self.self_attn_step(prefix, false, comp::ENC_ATTENTION, comp::ENC_ATTENTION));
            }
            Family::Mixer => {
                let p = format!("{prefix}.token_mix");
                let tm = TokenMixer::new(&mut self.l, &p, c.n_enc_fixed, c.token_hidden(), comp::ENC_TOKEN_MIXING);
                steps.push(self.step(&p, Body::TokenMix(tm), comp::ENC_TOKEN_MIXING, comp::ENC_TOKEN_MIXING));
            }
            Family::LConv | Family::DConv => steps.push(self.conv_step(prefix, Padding::Same, comp::ENC_CONV)),
            _ => steps.push(self.self_attn_step(prefix, false, comp::ENC_ATTENTION, comp::ENC_ATTENTION)),
        }
        steps.push(self.ffn_step(prefix, i, comp::ENC_FFN, comp::ENC_FFN));
        if c.funnel_pool_after(i) {
            steps.push(Step { norm: None, body: Body::Pool, scope: comp::ENC_POOLING });
        }
        steps
    }

    fn decoder_layer(&mut self, prefix: &str, i: usize) -> Vec<Step> {
        let c = self.c;
        let mut steps = Vec::new();
        match c.family {
            Family::Evolved => {
                let p = format!("{prefix}.parallel_attn");
                let pc = comp::DEC_PARALLEL_ATTENTION;
                let self_attn = self.attention(&format!("{p}.self"), pc);
                let cross = self.attention(&format!("{p}.cross"), pc);
                steps.push(self.step(&p, Body::ParallelAttn { self_attn, cross }, pc, pc));
                let p = format!("{prefix}.branch");
                let br = EtDecoderBranch::new(&mut self.l, &p, c.d_model, c.d_ff, comp::DEC_CONV);
                steps.push(self.step(&p, Body::EtDecBranch(br), comp::DEC_CONV, comp::DEC_CONV));
                steps.push(self.self_attn_step(prefix, true, comp::DEC_SELF_ATTENTION, comp::DEC_SELF_ATTENTION));
            }
            Family::LConv | Family::DConv => steps.push(self.conv_step(prefix, Padding::Causal, comp::DEC_CONV)),
            _ => steps.push(self.self_attn_step(prefix, true, comp::DEC_SELF_ATTENTION, comp::DEC_SELF_ATTENTION)),
        }
        steps.push(self.cross_attn_step(prefix, comp::DEC_CROSS_ATTENTION));
        steps.push(self.ffn_step(prefix, i, comp::DEC_FFN, comp::DEC_FFN));
        steps
    }

    fn has_bias(&self) -> bool {
        !matches!(self.c.family, Family::Performer | Family::LConv | Family::DConv)
    }

    fn stacks(&mut self) -> (Stack, Stack) {
        let c = self.c;
        let enc_bias = (self.has_bias() && c.family != Family::Mixer)
            .then(|| RelativeBias::new(&mut self.l, "encoder.relative_bias", c.n_heads, true, comp::ENC_BIAS));
        let dec_bias = self
            .has_bias()
            .then(|| RelativeBias::new(&mut self.l, "decoder.relative_bias", c.n_heads, false, comp::DEC_BIAS));
        let (enc_steps, dec_steps) = if c.family == Family::Universal {
            let enc = self.encoder_layer("encoder.shared", 0);
            let dec = self.decoder_layer("decoder.shared", 0);
            (repeat(&enc, c.n_recur), repeat(&dec, c.n_recur))
        } else {
            let enc = (0..c.enc_depth()).flat_map(|i| self.encoder_layer(&format!("encoder.layer{i}"), i)).collect();
            let dec = (0..c.dec_depth()).flat_map(|i| self.decoder_layer(&format!("decoder.layer{i}"), i)).collect();
            (enc, dec)
        };
        let enc_norm = self.norm("encoder.final_norm", comp::ENC_NORM);
        let dec_norm = self.norm("decoder.final_norm", comp::DEC_NORM);
        (
            Stack {
                steps: enc_steps,
                final_norm: enc_norm,
                bias: enc_bias,
                norm_scope: comp::ENC_NORM,
                bias_scope: comp::ENC_BIAS,
            },
            Stack {
                steps: dec_steps,
                final_norm: dec_norm,
                bias: dec_bias,
                norm_scope: comp::DEC_NORM,
                bias_scope: comp::DEC_BIAS,
            },
        )
    }

    /// One decoder-shaped layer serving every position of both stacks.
    fn albert_stacks(&mut self) -> (Stack, Stack) {
        let c = self.c;
        let pc = comp::SHARED_LAYER;
        let table = self.l.add("shared.relative_bias", &[crate::config::REL_BUCKETS, c.n_heads], Init::Normal(2.0), pc);
        let self_norm = self.norm("shared.self_attn.norm", pc);
        let self_attn = self.attention("shared.self_attn", pc);
        let cross_norm = self.norm("shared.cross_attn.norm", pc);
        let cross = self.attention("shared.cross_attn", pc);
        let ffn_norm = self.norm("shared.ffn.norm", pc);
        let ffn = Ffn::new(&mut self.l, "shared.ffn", c.d_model, c.d_ff, c.ffn_activation, pc);
        let final_norm = self.norm("shared.final_norm", pc);

        let sa = |causal, scope| Step {
            norm: Some(self_norm.clone()),
            body: Body::SelfAttn { attn: self_attn.clone(), causal },
            scope,
        };
        let ff = |scope| Step { norm: Some(ffn_norm.clone()), body: Body::Ffn(FfnKind::Dense(ffn.clone())), scope };
        let ca = Step {
            norm: Some(cross_norm),
            body: Body::CrossAttn(cross),
            scope: comp::DEC_CROSS_ATTENTION,
        };
        let enc_layer = vec![sa(false, comp::ENC_ATTENTION), ff(comp::ENC_FFN)];
        let dec_layer = vec![sa(true, comp::DEC_SELF_ATTENTION), ca, ff(comp::DEC_FFN)];
        let heads = c.n_heads;
        (
            Stack {
                steps: repeat(&enc_layer, c.n_layers_enc),
                final_norm: final_norm.clone(),
                bias: Some(RelativeBias { table, heads, bidirectional: true }),
                norm_scope: comp::ENC_NORM,
                bias_scope: comp::ENC_BIAS,
            },
            Stack {
                steps: repeat(&dec_layer, c.n_layers_dec),
                final_norm,
                bias: Some(RelativeBias { table, heads, bidirectional: false }),
                norm_scope: comp::DEC_NORM,
                bias_scope: comp::DEC_BIAS,
            },
        )
    }
}

impl Architecture {
    pub fn build(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let c = config;
        let mut b = Builder { c, l: Layout::new() };
        let embedding = if c.family == Family::Albert {
            let table = b.l.add("embedding.table", &[c.vocab, c.embed_factor], Init::Normal(EMBED_STD), comp::EMBEDDING);
            let proj = Linear::new(&mut b.l, "embedding.proj", c.embed_factor, c.d_model, comp::EMBEDDING);
            Embedding { table, proj: Some(proj), positions: None }
        } else {
            let table = b.l.add("embedding.table", &[c.vocab, c.d_model], Init::Normal(EMBED_STD), comp::EMBEDDING);
            let positions = (c.family == Family::Performer).then(|| {
                let shape = [c.max_position, c.d_model];
                (
                    b.l.add("embedding.enc_positions", &shape, Init::Normal(EMBED_STD), comp::EMBEDDING),
                    b.l.add("embedding.dec_positions", &shape, Init::Normal(EMBED_STD), comp::EMBEDDING),
                )
            });
            Embedding { table, proj: None, positions }
        };
        let (encoder, decoder) = if c.family == Family::Albert { b.albert_stacks() } else { b.stacks() };
        let head = match c.family {
            Family::Albert => Head::Factorized {
                proj: Linear::new(&mut b.l, "head.proj", c.d_model, c.embed_factor, comp::HEAD),
                table: b.l.add("head.table", &[c.vocab, c.embed_factor], Init::Normal(EMBED_STD), comp::HEAD),
                width: c.embed_factor,
            },
            Family::Mos => Head::Mos(MosHead::new(&mut b.l, "head.mos", c.d_model, c.vocab, c.k_mos, comp::HEAD)),
            _ => Head::Tied,
        };
        Ok(Architecture { config: config.clone(), layout: b.l, embedding, encoder, decoder, head })
    }

    pub fn param_count(&self) -> u64 {
        self.layout.count()
    }

    /// Parameter counts grouped by component label.
    pub fn params_by_component(&self) -> BTreeMap<String, u64> {
        let mut out = BTreeMap::new();
        for s in self.layout.specs() {
            *out.entry(s.component.to_string()).or_insert(0) += s.numel();
        }
        out
    }

    /// Replaces every GLU gate branch by ones (or restores it).
    pub fn set_unit_gate(&mut self, on: bool) {
        for stack in [&mut self.encoder, &mut self.decoder] {
            for step in &mut stack.steps {
                if let Body::Ffn(FfnKind::Glu(g)) = &mut step.body {
                    g.unit_gate = on;
                }
            }
        }
    }

    fn embed<T: Float>(&self, cx: &mut Ctx<'_, T>, ids: &[usize], decoder: bool) -> Result<Var> {
        let table = cx.p(self.embedding.table);
        let mut x = cx.g.embed(ids, table)?;
        if let Some(proj) = &self.embedding.proj {
            x = proj.forward(cx, x)?;
        }
        if let Some((enc, dec)) = self.embedding.positions {
            if ids.len() > self.config.max_position {
                return Err(Error::Input(format!(
                    "sequence length {} exceeds max_position {}",
                    ids.len(),
                    self.config.max_position
                )));
            }
            let table = cx.p(if decoder { dec } else { enc });
            let positions: Vec<usize> = (0..ids.len()).collect();
            let p = cx.g.embed(&positions, table)?;
            x = cx.g.add(x, p)?;
        }
        Ok(x)
    }

    fn run_stack<T: Float>(
        &self,
        cx: &mut Ctx<'_, T>,
        stack: &Stack,
        mut x: Var,
        memory: Option<Var>,
        aux: &mut Vec<Var>,
    ) -> Result<Var> {
        let mut bias: Option<(usize, Var)> = None;
        for step in &stack.steps {
            cx.g.set_scope(step.scope);
            if let Body::Pool = step.body {
                x = cx.g.mean_pool_stride2(x)?;
                continue;
            }
            let n = cx.g.shape(x)[0];
            let wants_bias = matches!(step.body, Body::SelfAttn { .. } | Body::ParallelAttn { .. });
            if let (true, Some(rb)) = (wants_bias, &stack.bias) {
                if bias.map_or(true, |(len, _)| len != n) {
                    cx.g.set_scope(stack.bias_scope);
                    bias = Some((n, rb.forward(cx, n, n)?));
                    cx.g.set_scope(step.scope);
                }
            }
            let b = if wants_bias { bias.map(|(_, v)| v) } else { None };
            let h = match &step.norm {
                Some(norm) => norm.forward(cx, x)?,
                None => x,
            };
            let mem = || memory.ok_or_else(|| Error::contract("cross-attention without encoder output"));
            let y = match &step.body {
                Body::SelfAttn { attn, causal } => attn.forward(cx, h, h, b, *causal)?,
                Body::CrossAttn(attn) => attn.forward(cx, h, mem()?, None, false)?,
                Body::KernelSelf { attn, causal } => attn.forward(cx, h, h, *causal)?,
                Body::KernelCross(attn) => attn.forward(cx, h, mem()?, false)?,
                Body::Ffn(FfnKind::Dense(f)) => f.forward(cx, h)?,
                Body::Ffn(FfnKind::Glu(f)) => f.forward(cx, h)?,
                Body::Ffn(FfnKind::Moe(f)) => {
                    let out = f.forward(cx, h)?;
                    aux.push(out.aux);
                    out.out
                }
                Body::Conv { block, padding } => block.forward(cx, h, *padding)?,
                Body::TokenMix(tm) => tm.forward(cx, h)?,
                Body::Glu(glu) => glu.forward(cx, h)?,
                Body::EtEncBranch(br) => br.forward(cx, h)?,
                Body::EtDecBranch(br) => br.forward(cx, h)?,
                Body::ParallelAttn { self_attn, cross } => {
                    let s = self_attn.forward(cx, h, h, b, true)?;
                    let c = cross.forward(cx, h, mem()?, None, false)?;
                    cx.g.add(s, c)?
                }
                Body::Pool => unreachable!("handled above"),
            };
            x = cx.g.add(x, y)?;
        }
        cx.g.set_scope(stack.norm_scope);
        stack.final_norm.forward(cx, x)
    }

    fn head<T: Float>(&self, cx: &mut Ctx<'_, T>, h: Var) -> Result<Var> {
        let d = self.config.d_model as f64;
        match &self.head {
            Head::Tied => {
                let h = cx.g.scale(h, 1.0 / d.sqrt());
                let table = cx.p(self.embedding.table);
                cx.g.matmul_t(h, table)
            }
            Head::Factorized { proj, table, width } => {
                let h = proj.forward(cx, h)?;
                let h = cx.g.scale(h, 1.0 / (*width as f64).sqrt());
                let t = cx.p(*table);
                cx.g.matmul_t(h, t)
            }
            Head::Mos(mos) => mos.forward(cx, h),
        }
    }

    /// Encoder over `enc_ids`, causal decoder over `dec_ids`, output head.
    pub fn forward<T: Float>(&self, cx: &mut Ctx<'_, T>, enc_ids: &[usize], dec_ids: &[usize]) -> Result<Forward> {
        if enc_ids.is_empty() || dec_ids.is_empty() {
            return Err(Error::Input("encoder and decoder inputs must be nonempty".into()));
        }
        let prev = cx.g.set_scope(comp::EMBEDDING);
        let mut aux = Vec::new();
        let x = self.embed(cx, enc_ids, false)?;
        let enc = self.run_stack(cx, &self.encoder, x, None, &mut aux)?;
        let enc_out_len = cx.g.shape(enc)[0];
        cx.g.set_scope(comp::EMBEDDING);
        let y = self.embed(cx, dec_ids, true)?;
        let dec = self.run_stack(cx, &self.decoder, y, Some(enc), &mut aux)?;
        cx.g.set_scope(comp::HEAD);
        let logits = self.head(cx, dec)?;
        cx.g.set_scope(&prev);
        Ok(Forward { logits, aux, enc_out_len })
    }

    /// Mean token cross-entropy plus the weighted load-balancing terms.
    pub fn loss<T: Float>(
        &self,
        cx: &mut Ctx<'_, T>,
        enc_ids: &[usize],
        dec_ids: &[usize],
        targets: &[usize],
    ) -> Result<Loss> {
        let forward = self.forward(cx, enc_ids, dec_ids)?;
        let prev = cx.g.set_scope("loss");
        let ce = cx.g.cross_entropy(forward.logits, targets)?;
        let mut total = ce;
        for &a in &forward.aux {
            let w = cx.g.scale(a, SWITCH_AUX_WEIGHT);
            total = cx.g.add(total, w)?;
        }
        cx.g.set_scope(&prev);
        Ok(Loss { total, cross_entropy: ce, forward })
    }
}

/// An [`Architecture`] with parameter values.
#[derive(Clone, Debug)]
pub struct Model<T: Float> {
    pub arch: Architecture,
    pub params: Vec<Tensor<T>>,
}

impl<T: Float> Model<T> {
    /// Builds and initializes from `seed`.
    pub fn build(config: &ModelConfig, seed: u64) -> Result<Self> {
        let arch = Architecture::build(config)?;
        let params = arch.layout.materialize(seed);
        Ok(Model { arch, params })
    }

    pub fn from_params(config: &ModelConfig, params: Vec<Tensor<T>>) -> Result<Self> {
        let arch = Architecture::build(config)?;
        arch.layout.check_values(&params)?;
        Ok(Model { arch, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.arch.config
    }

    /// Number of scalars actually held.
    pub fn live_param_count(&self) -> u64 {
        self.params.iter().map(|p| p.numel() as u64).sum()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.arch.layout.find(name).map(|id| &self.params[id.0])
    }

    pub fn set(&mut self, name: &str, value: Tensor<T>) -> Result<()> {
        let id = self.arch.layout.find(name).ok_or_else(|| Error::Input(format!("no parameter named '{}'", name)))?;
        if value.shape() != self.params[id.0].shape() {
            return Err(Error::dim(format!(
                "{}: shape {:?}, expected {:?}",
                name,
                value.shape(),
                self.params[id.0].shape()
            )));
        }
        self.params[id.0] = value;
        Ok(())
    }

    /// Named parameter values in layout order.
    pub fn named_params(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.arch.layout.specs().iter().map(|s| s.name.as_str()).zip(&self.params)
    }

    pub fn cast<U: Float>(&self) -> Model<U> {
        Model { arch: self.arch.clone(), params: self.params.iter().map(Tensor::cast).collect() }
    }

    /// Logits for one example on a fresh tape.
    pub fn logits(&self, enc_ids: &[usize], dec_ids: &[usize]) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let mut cx = Ctx::new(&mut g, &self.params);
        let f = self.arch.forward(&mut cx, enc_ids, dec_ids)?;
        Ok(g.value(f.logits).clone())
    }
}

#[cfg(test)]
mod tests;
