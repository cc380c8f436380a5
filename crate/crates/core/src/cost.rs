//! Closed-form parameter and forward multiply counts.
//!
//! Every formula here is written out independently of the model code; the
//! tests hold the two sides to exact equality. Public FLOPs are twice the
//! multiply count.

use std::collections::BTreeMap;
use std::io::Write;

use serde::Serialize;

use crate::config::{switch_capacity, Family, ModelConfig, REL_BUCKETS};
use crate::error::Result;
use crate::layers::component as comp;
use crate::layers::Ctx;
use crate::model::Architecture;
use crate::tensor::Graph;

/// Sequence length used when none is given.
pub const DEFAULT_SEQ_LEN: usize = 512;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CostReport {
    pub family: Family,
    pub params_total: u64,
    pub params_by_component: BTreeMap<String, u64>,
    /// Encoder length actually accounted (the fixed length for Mixer).
    pub n_enc: usize,
    pub n_dec: usize,
    pub flops_forward: u64,
    pub flops_by_component: BTreeMap<String, u64>,
}

#[derive(Default)]
struct Tally {
    params: BTreeMap<&'static str, u64>,
    mults: BTreeMap<&'static str, u64>,
}

impl Tally {
    fn p(&mut self, c: &'static str, v: u64) {
        if v > 0 {
            *self.params.entry(c).or_insert(0) += v;
        }
    }

    fn m(&mut self, c: &'static str, v: u64) {
        if v > 0 {
            *self.mults.entry(c).or_insert(0) += v;
        }
    }
}

/// Config dimensions as `u64`.
#[derive(Clone, Copy)]
struct Dims {
    d: u64,
    f: u64,
    h: u64,
    k: u64,
    inner: u64,
    v: u64,
}

impl Dims {
    fn of(c: &ModelConfig) -> Self {
        let (h, k) = (c.n_heads as u64, c.d_kv as u64);
        Dims { d: c.d_model as u64, f: c.d_ff as u64, h, k, inner: h * k, v: c.vocab as u64 }
    }

    fn attention_params(&self) -> u64 {
        4 * self.d * self.inner
    }

    /// Softmax attention of `nq` queries over `nk` keys.
    fn attention_mults(&self, nq: u64, nk: u64, bias: bool, causal: bool) -> u64 {
        let elementwise = 3 + bias as u64 + causal as u64;
        2 * nq * self.d * self.inner + 2 * nk * self.d * self.inner + 2 * nq * nk * self.inner + self.h * nq * nk * elementwise
    }

    /// ReLU-feature linear attention of `nq` queries over `nk` keys.
    fn kernel_attention_mults(&self, nq: u64, nk: u64) -> u64 {
        let k = self.k;
        let per_head = nk * k * k + nk * k + nq * k * k + nq * k + nq + nq * k;
        2 * nq * self.d * self.inner + nq * self.inner + 2 * nk * self.d * self.inner + nk * self.inner + self.h * per_head
    }

    /// Pre-norm plus residual add around a sublayer.
    fn step_mults(&self, rows: u64) -> u64 {
        4 * rows * self.d
    }
}

struct Counter<'a> {
    c: &'a ModelConfig,
    x: Dims,
    t: Tally,
}

impl Counter<'_> {
    fn biased(&self) -> bool {
        !matches!(self.c.family, Family::Performer | Family::LConv | Family::DConv)
    }

    fn self_attention(&mut self, scope: &'static str, pc: &'static str, rows: u64, causal: bool) {
        let x = self.x;
        self.t.p(pc, x.attention_params() + x.d);
        let body = if self.c.family == Family::Performer {
            x.kernel_attention_mults(rows, rows)
        } else {
            x.attention_mults(rows, rows, self.biased(), causal)
        };
        self.t.m(scope, body + x.step_mults(rows));
    }

    fn cross_attention(&mut self, pc: &'static str, rows: u64, memory: u64) {
        let x = self.x;
        self.t.p(pc, x.attention_params() + x.d);
        let body = if self.c.family == Family::Performer {
            x.kernel_attention_mults(rows, memory)
        } else {
            x.attention_mults(rows, memory, false, false)
        };
        self.t.m(comp::DEC_CROSS_ATTENTION, body + x.step_mults(rows));
    }

    fn ffn(&mut self, scope: &'static str, pc: &'static str, rows: u64, layer: usize) {
        let (c, x) = (self.c, self.x);
        let (d, f, r) = (x.d, x.f, rows);
        let (params, body) = if c.family == Family::Glu {
            (3 * d * f, 3 * r * d * f + 2 * r * f)
        } else if c.is_moe_layer(layer) {
            let e = c.n_experts as u64;
            let cap = switch_capacity(c.capacity_factor, rows as usize, c.n_experts) as u64;
            (d * e + 2 * d * f * e, r * d * e + 2 * r * e + e * cap * (2 * d * f + f) + r * d + r * e + 2 * e)
        } else {
            (2 * d * f, 2 * r * d * f + r * f)
        };
        self.t.p(pc, params + d);
        self.t.m(scope, body + x.step_mults(r));
    }

    fn conv(&mut self, scope: &'static str, rows: u64) {
        let (c, x) = (self.c, self.x);
        let (d, r) = (x.d, rows);
        let (g, w) = (c.n_heads as u64, c.kernel_width as u64);
        let (kernel_params, kernel_mults) =
            if c.family == Family::DConv { (d * g * w, r * d * g * w + 2 * r * g * w) } else { (g * w, 2 * g * w) };
        self.t.p(scope, 3 * d * d + kernel_params + d);
        let body = 2 * r * d * d + 2 * r * d + kernel_mults + r * d * w + r * d * d;
        self.t.m(scope, body + x.step_mults(r));
    }

    fn encoder_layer(&mut self, rows: u64, layer: usize) -> u64 {
        let (c, x) = (self.c, self.x);
        let (d, f, r) = (x.d, x.f, rows);
        match c.family {
            Family::Evolved => {
                let half = d / 2;
                self.t.p(comp::ENC_FFN, 2 * d * d + d);
                self.t.m(comp::ENC_FFN, 2 * r * d * d + 2 * r * d + x.step_mults(r));
                self.t.p(comp::ENC_CONV, d * f + 3 * d * half + f + 9 * f + f * half + d);
                let branch = r * d * f + r * f + 3 * r * d * half + r * half + r * f + 3 * r * f + 9 * r * f + r * f * half;
                self.t.m(comp::ENC_CONV, branch + x.step_mults(r));
                self.self_attention(comp::ENC_ATTENTION, comp::ENC_ATTENTION, r, false);
            }
            Family::Mixer => {
                let th = c.token_hidden() as u64;
                self.t.p(comp::ENC_TOKEN_MIXING, 2 * r * th + d);
                self.t.m(comp::ENC_TOKEN_MIXING, 2 * d * r * th + d * th + x.step_mults(r));
            }
            Family::LConv | Family::DConv => self.conv(comp::ENC_CONV, r),
            _ => self.self_attention(comp::ENC_ATTENTION, comp::ENC_ATTENTION, r, false),
        }
        self.ffn(comp::ENC_FFN, comp::ENC_FFN, r, layer);
        if c.funnel_pool_after(layer) {
            self.t.m(comp::ENC_POOLING, r * d);
            return r.div_ceil(2);
        }
        r
    }

    fn decoder_layer(&mut self, rows: u64, memory: u64, layer: usize) {
        let (c, x) = (self.c, self.x);
        let (d, f, r) = (x.d, x.f, rows);
        match c.family {
            Family::Evolved => {
                let half = d / 2;
                let pc = comp::DEC_PARALLEL_ATTENTION;
                self.t.p(pc, 2 * x.attention_params() + d);
                let body = x.attention_mults(r, r, true, true) + x.attention_mults(r, memory, false, false) + r * d;
                self.t.m(pc, body + x.step_mults(r));
                self.t.p(comp::DEC_CONV, 11 * d + d * f + 7 * d + d * half + f + 7 * f + f * d + d);
                let branch = 11 * r * d
                    + r * d * f
                    + r * f
                    + 7 * r * d
                    + r * d * half
                    + r * f
                    + 3 * r * f
                    + 7 * r * f
                    + r * f * d;
                self.t.m(comp::DEC_CONV, branch + x.step_mults(r));
                self.self_attention(comp::DEC_SELF_ATTENTION, comp::DEC_SELF_ATTENTION, r, true);
            }
            Family::LConv | Family::DConv => self.conv(comp::DEC_CONV, r),
            _ => self.self_attention(comp::DEC_SELF_ATTENTION, comp::DEC_SELF_ATTENTION, r, true),
        }
        self.cross_attention(comp::DEC_CROSS_ATTENTION, r, memory);
        self.ffn(comp::DEC_FFN, comp::DEC_FFN, r, layer);
    }

    /// Both stacks; returns the encoder output length.
    fn stacks(&mut self, n_enc: u64, n_dec: u64) -> u64 {
        let c = self.c;
        let x = self.x;
        let bias = REL_BUCKETS as u64 * x.h;
        if self.biased() && c.family != Family::Mixer {
            self.t.p(comp::ENC_BIAS, bias);
        }
        if self.biased() {
            self.t.p(comp::DEC_BIAS, bias);
        }
        let mut rows = n_enc;
        if c.family == Family::Universal {
            // parameters once, compute once per recurrence
            let mut shared = Counter { c, x, t: Tally::default() };
            let enc_rows = shared.encoder_layer(rows, 0);
            shared.decoder_layer(n_dec, enc_rows, 0);
            for (k, v) in shared.t.params {
                self.t.p(k, v);
            }
            for (k, v) in shared.t.mults {
                self.t.m(k, v * c.n_recur as u64);
            }
        } else {
            for i in 0..c.enc_depth() {
                rows = self.encoder_layer(rows, i);
            }
            for i in 0..c.dec_depth() {
                self.decoder_layer(n_dec, rows, i);
            }
        }
        self.t.p(comp::ENC_NORM, x.d);
        self.t.p(comp::DEC_NORM, x.d);
        rows
    }

    /// One shared decoder-shaped layer, final norm and bias table.
    fn albert_stacks(&mut self, n_enc: u64, n_dec: u64) -> u64 {
        let (c, x) = (self.c, self.x);
        let (d, f) = (x.d, x.f);
        let sh = comp::SHARED_LAYER;
        self.t.p(sh, REL_BUCKETS as u64 * x.h + 2 * (x.attention_params() + d) + 2 * d * f + d + d);
        let per_enc = x.attention_mults(n_enc, n_enc, true, false) + x.step_mults(n_enc);
        let per_enc_ffn = 2 * n_enc * d * f + n_enc * f + x.step_mults(n_enc);
        let layers = c.n_layers_enc as u64;
        self.t.m(comp::ENC_ATTENTION, layers * per_enc);
        self.t.m(comp::ENC_FFN, layers * per_enc_ffn);
        let layers = c.n_layers_dec as u64;
        let self_attn = x.attention_mults(n_dec, n_dec, true, true) + x.step_mults(n_dec);
        let cross = x.attention_mults(n_dec, n_enc, false, false) + x.step_mults(n_dec);
        let ffn = 2 * n_dec * d * f + n_dec * f + x.step_mults(n_dec);
        self.t.m(comp::DEC_SELF_ATTENTION, layers * self_attn);
        self.t.m(comp::DEC_CROSS_ATTENTION, layers * cross);
        self.t.m(comp::DEC_FFN, layers * ffn);
        n_enc
    }
}

/// Parameters and forward cost at encoder length `n_enc` and decoder length `n_dec`.
pub fn count_flops(config: &ModelConfig, n_enc: usize, n_dec: usize) -> Result<CostReport> {
    config.validate()?;
    let c = config;
    let x = Dims::of(c);
    let (d, v) = (x.d, x.v);
    let n_enc = if c.family == Family::Mixer { c.n_enc_fixed } else { n_enc.max(1) };
    let n_dec = n_dec.max(1);
    let (ne, m) = (n_enc as u64, n_dec as u64);
    let mut k = Counter { c, x, t: Tally::default() };

    match c.family {
        Family::Albert => {
            let e = c.embed_factor as u64;
            k.t.p(comp::EMBEDDING, v * e + e * d);
            k.t.m(comp::EMBEDDING, (ne + m) * e * d);
        }
        Family::Performer => {
            k.t.p(comp::EMBEDDING, v * d + 2 * c.max_position as u64 * d);
            k.t.m(comp::EMBEDDING, (ne + m) * d);
        }
        _ => k.t.p(comp::EMBEDDING, v * d),
    }

    let enc_rows = if c.family == Family::Albert { k.albert_stacks(ne, m) } else { k.stacks(ne, m) };
    k.t.m(comp::ENC_NORM, 3 * enc_rows * d);
    k.t.m(comp::DEC_NORM, 3 * m * d);

    match c.family {
        Family::Albert => {
            let e = c.embed_factor as u64;
            k.t.p(comp::HEAD, d * e + v * e);
            k.t.m(comp::HEAD, m * d * e + m * e + m * e * v);
        }
        Family::Mos => {
            let kk = c.k_mos as u64;
            k.t.p(comp::HEAD, kk * d * d + d * kk + v * d);
            let per_component = m * d * d + 2 * m * d + m * d * v + 3 * m * v;
            k.t.m(comp::HEAD, m * d * kk + 2 * m * kk + kk * per_component + (kk - 1) * m * v + m * v);
        }
        _ => k.t.m(comp::HEAD, m * d + m * d * v),
    }

    let params_by_component: BTreeMap<String, u64> = k.t.params.iter().map(|(k, v)| (k.to_string(), *v)).collect();
    let flops_by_component: BTreeMap<String, u64> = k.t.mults.iter().map(|(k, v)| (k.to_string(), 2 * v)).collect();
    Ok(CostReport {
        family: c.family,
        params_total: params_by_component.values().sum(),
        params_by_component,
        n_enc,
        n_dec,
        flops_forward: flops_by_component.values().sum(),
        flops_by_component,
    })
}

/// [`count_flops`] at the default accounting length.
pub fn count_params(config: &ModelConfig) -> Result<CostReport> {
    count_flops(config, DEFAULT_SEQ_LEN, DEFAULT_SEQ_LEN)
}

/// Forward FLOPs measured by running the model on the tape, by component.
pub fn measure_flops(config: &ModelConfig, n_enc: usize, n_dec: usize) -> Result<(u64, BTreeMap<String, u64>)> {
    let arch = Architecture::build(config)?;
    let params = arch.layout.materialize::<f64>(0);
    let n_enc = if config.family == Family::Mixer { config.n_enc_fixed } else { n_enc };
    let enc: Vec<usize> = (0..n_enc).map(|i| (i * 31 + 7) % config.vocab).collect();
    let dec: Vec<usize> = (0..n_dec).map(|i| (i * 17 + 3) % config.vocab).collect();
    let mut g = Graph::new();
    let mut cx = Ctx::new(&mut g, &params);
    arch.forward(&mut cx, &enc, &dec)?;
    let by: BTreeMap<String, u64> =
        g.scoped_counts().iter().filter(|(_, &v)| v > 0).map(|(k, &v)| (k.clone(), 2 * v)).collect();
    Ok((2 * g.multiply_count(), by))
}

impl CostReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// One row per component: `family,component,params,flops`.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["family", "component", "params", "flops", "n_enc", "n_dec"])?;
        let mut names: Vec<&String> = self.params_by_component.keys().chain(self.flops_by_component.keys()).collect();
        names.sort();
        names.dedup();
        for name in names {
            out.write_record([
                self.family.name(),
                name,
                &self.params_by_component.get(name).copied().unwrap_or(0).to_string(),
                &self.flops_by_component.get(name).copied().unwrap_or(0).to_string(),
                &self.n_enc.to_string(),
                &self.n_dec.to_string(),
            ])?;
        }
        out.flush()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::tiny_config;

    #[test]
    fn closed_form_matches_instrumentation_for_every_family() {
        for fam in Family::ALL {
            let c = tiny_config(fam);
            for (ne, nd) in [(6, 5), (16, 16), (9, 1)] {
                let r = count_flops(&c, ne, nd).unwrap();
                let (total, by) = measure_flops(&c, ne, nd).unwrap();
                assert_eq!(r.flops_by_component, by, "{fam} n=({ne},{nd})");
                assert_eq!(r.flops_forward, total, "{fam}");
            }
            let arch = Architecture::build(&c).unwrap();
            assert_eq!(r_params(&c), arch.params_by_component(), "{fam}");
        }
    }

    fn r_params(c: &ModelConfig) -> BTreeMap<String, u64> {
        count_params(c).unwrap().params_by_component
    }

    #[test]
    fn universal_compute_grows_with_recurrence_but_params_do_not() {
        let mut c = ModelConfig::new(Family::Universal, 6, 1024, 256, 32, 8, 1000);
        let mut last: Option<CostReport> = None;
        for r in 2..=5 {
            c.n_recur = r;
            let rep = count_flops(&c, 64, 64).unwrap();
            if let Some(prev) = &last {
                assert_eq!(prev.params_total, rep.params_total);
                assert!(rep.flops_forward > prev.flops_forward);
            }
            last = Some(rep);
        }
    }

    #[test]
    fn performer_attention_is_cheaper_at_base_length() {
        let p = count_flops(&ModelConfig::new(Family::Performer, 12, 3072, 768, 64, 12, 32128), 512, 512).unwrap();
        let v = count_flops(&ModelConfig::new(Family::Transformer, 12, 3072, 768, 64, 12, 32128), 512, 512).unwrap();
        let key = comp::ENC_ATTENTION;
        assert!(p.flops_by_component[key] < v.flops_by_component[key]);
    }

    #[test]
    fn csv_has_one_row_per_component() {
        let r = count_params(&tiny_config(Family::Transformer)).unwrap();
        let mut buf = Vec::new();
        r.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let rows = text.lines().count() - 1;
        let mut keys: Vec<_> = r.params_by_component.keys().chain(r.flops_by_component.keys()).collect();
        keys.sort();
        keys.dedup();
        assert_eq!(rows, keys.len());
        let json: serde_json::Value = serde_json::from_str(&r.to_json().unwrap()).unwrap();
        assert_eq!(json["params_total"].as_u64().unwrap(), r.params_total);
    }
}
