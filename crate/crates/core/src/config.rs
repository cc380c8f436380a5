//! Model configuration and its key-value text form.
//!
//! ```text
//! # comment
//! family = transformer
//! n_layers_enc = 12
//! d_model = 768
//! ```

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const REL_BUCKETS: usize = 32;
pub const REL_MAX_DISTANCE: usize = 128;
pub const NORM_EPS: f64 = 1e-6;
pub const SWITCH_AUX_WEIGHT: f64 = 0.01;
pub const KERNEL_ATTENTION_EPS: f64 = 1e-6;
pub const FUNNEL_MAX_POOLS: usize = 2;
/// Added to masked attention logits; exp underflows to exactly zero.
pub const MASK_VALUE: f64 = -1e30;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    Transformer,
    Evolved,
    Universal,
    Switch,
    Performer,
    Funnel,
    Albert,
    Mos,
    Glu,
    #[serde(rename = "lconv")]
    LConv,
    #[serde(rename = "dconv")]
    DConv,
    Mixer,
}

impl Family {
    pub const ALL: [Family; 12] = [
        Family::Transformer,
        Family::Evolved,
        Family::Universal,
        Family::Switch,
        Family::Performer,
        Family::Funnel,
        Family::Albert,
        Family::Mos,
        Family::Glu,
        Family::LConv,
        Family::DConv,
        Family::Mixer,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Family::Transformer => "transformer",
            Family::Evolved => "evolved",
            Family::Universal => "universal",
            Family::Switch => "switch",
            Family::Performer => "performer",
            Family::Funnel => "funnel",
            Family::Albert => "albert",
            Family::Mos => "mos",
            Family::Glu => "glu",
            Family::LConv => "lconv",
            Family::DConv => "dconv",
            Family::Mixer => "mixer",
        }
    }

    /// Row label used in published result tables.
    pub fn display_name(self) -> &'static str {
        match self {
            Family::Transformer => "Transformer",
            Family::Evolved => "Evolved Transformer",
            Family::Universal => "Universal Transformer",
            Family::Switch => "Switch Transformer",
            Family::Performer => "Performer",
            Family::Funnel => "Funnel Transformer",
            Family::Albert => "ALBERT",
            Family::Mos => "MoS-Transformer",
            Family::Glu => "GLU-Transformer",
            Family::LConv => "LConv",
            Family::DConv => "DConv",
            Family::Mixer => "MLP-Mixer",
        }
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Family {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let key: String = s.trim().to_ascii_lowercase().chars().filter(|c| c.is_ascii_alphanumeric()).collect();
        let fam = match key.as_str() {
            "transformer" | "vanilla" | "t5" => Family::Transformer,
            "evolved" | "evolvedtransformer" | "et" => Family::Evolved,
            "universal" | "universaltransformer" | "ut" => Family::Universal,
            "switch" | "switchtransformer" => Family::Switch,
            "performer" => Family::Performer,
            "funnel" | "funneltransformer" => Family::Funnel,
            "albert" => Family::Albert,
            "mos" | "mostransformer" => Family::Mos,
            "glu" | "glutransformer" | "glutrans" => Family::Glu,
            "lconv" => Family::LConv,
            "dconv" => Family::DConv,
            "mixer" | "mlpmixer" => Family::Mixer,
            _ => return Err(Error::config(format!("unknown family '{}'", s.trim()))),
        };
        Ok(fam)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Gelu,
}

impl FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "relu" => Ok(Activation::Relu),
            "gelu" => Ok(Activation::Gelu),
            other => Err(Error::config(format!("unknown activation '{}'", other))),
        }
    }
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Activation::Relu => "relu",
            Activation::Gelu => "gelu",
        })
    }
}

/// Architecture family plus hyperparameters. Family-specific fields are
/// ignored by the other families.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub family: Family,
    pub n_layers_enc: usize,
    pub n_layers_dec: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub d_kv: usize,
    pub n_heads: usize,
    pub vocab: usize,
    /// Switch only.
    pub n_experts: usize,
    /// Switch only.
    pub capacity_factor: f64,
    /// Universal only: applications of the shared layer per stack.
    pub n_recur: usize,
    /// MoS only.
    pub k_mos: usize,
    /// ALBERT only; must be set for ALBERT and unset elsewhere.
    pub share_enc_dec: bool,
    /// ALBERT only.
    pub embed_factor: usize,
    /// Mixer only: required encoder length.
    pub n_enc_fixed: usize,
    /// LConv/DConv only.
    pub kernel_width: usize,
    /// Performer only: rows of the learned absolute position tables.
    pub max_position: usize,
    pub ffn_activation: Activation,
}

impl ModelConfig {
    /// Vanilla geometry with family defaults filled in.
    #[allow(clippy::too_many_arguments)]
    pub fn new(family: Family, n_layers: usize, d_ff: usize, d_model: usize, d_kv: usize, n_heads: usize, vocab: usize) -> Self {
        ModelConfig {
            family,
            n_layers_enc: n_layers,
            n_layers_dec: n_layers,
            d_model,
            d_ff,
            d_kv,
            n_heads,
            vocab,
            n_experts: 1,
            capacity_factor: 1.25,
            n_recur: 3,
            k_mos: 4,
            share_enc_dec: family == Family::Albert,
            embed_factor: (d_model / 4).max(1),
            n_enc_fixed: 512,
            kernel_width: 7,
            max_position: 512,
            ffn_activation: Activation::Relu,
        }
    }

    pub fn inner_dim(&self) -> usize {
        self.n_heads * self.d_kv
    }

    /// Encoder layer count actually applied.
    pub fn enc_depth(&self) -> usize {
        match self.family {
            Family::Universal => self.n_recur,
            Family::Evolved => self.n_layers_enc.div_ceil(2),
            _ => self.n_layers_enc,
        }
    }

    pub fn dec_depth(&self) -> usize {
        match self.family {
            Family::Universal => self.n_recur,
            Family::Evolved => self.n_layers_dec.div_ceil(2),
            _ => self.n_layers_dec,
        }
    }

    /// Whether encoder/decoder layer `i` uses a mixture-of-experts FFN.
    pub fn is_moe_layer(&self, i: usize) -> bool {
        self.family == Family::Switch && i % 2 == 1
    }

    /// Encoder block indices followed by a stride-2 pool.
    pub fn funnel_pool_after(&self, i: usize) -> bool {
        self.family == Family::Funnel && (i + 1) % 2 == 0 && (i + 1) / 2 <= FUNNEL_MAX_POOLS
    }

    pub fn funnel_pools(&self) -> usize {
        (0..self.n_layers_enc).filter(|&i| self.funnel_pool_after(i)).count()
    }

    /// Hidden width of the Mixer token MLP.
    pub fn token_hidden(&self) -> usize {
        (self.d_model / 2).max(1)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("n_layers_enc", self.n_layers_enc),
            ("n_layers_dec", self.n_layers_dec),
            ("d_model", self.d_model),
            ("d_ff", self.d_ff),
            ("d_kv", self.d_kv),
            ("n_heads", self.n_heads),
            ("n_experts", self.n_experts),
            ("n_recur", self.n_recur),
            ("k_mos", self.k_mos),
            ("embed_factor", self.embed_factor),
            ("n_enc_fixed", self.n_enc_fixed),
            ("kernel_width", self.kernel_width),
            ("max_position", self.max_position),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::config(format!("{} must be at least 1", name)));
            }
        }
        if self.vocab < 2 {
            return Err(Error::config("vocab must be at least 2"));
        }
        if !(self.capacity_factor.is_finite() && self.capacity_factor > 0.0) {
            return Err(Error::config("capacity_factor must be positive"));
        }
        if self.share_enc_dec != (self.family == Family::Albert) {
            return Err(Error::config(format!(
                "share_enc_dec={} does not apply to family {}",
                self.share_enc_dec, self.family
            )));
        }
        if matches!(self.family, Family::LConv | Family::DConv) && self.d_model % self.n_heads != 0 {
            return Err(Error::config(format!(
                "d_model {} not divisible into {} convolution groups",
                self.d_model, self.n_heads
            )));
        }
        if self.family == Family::Evolved && self.d_model < 2 {
            return Err(Error::config("evolved cells need d_model >= 2"));
        }
        Ok(())
    }

    pub fn to_kv(&self) -> String {
        let mut s = String::new();
        let mut put = |k: &str, v: String| {
            s.push_str(k);
            s.push_str(" = ");
            s.push_str(&v);
            s.push('\n');
        };
        put("family", self.family.to_string());
        put("n_layers_enc", self.n_layers_enc.to_string());
        put("n_layers_dec", self.n_layers_dec.to_string());
        put("d_model", self.d_model.to_string());
        put("d_ff", self.d_ff.to_string());
        put("d_kv", self.d_kv.to_string());
        put("n_heads", self.n_heads.to_string());
        put("vocab", self.vocab.to_string());
        put("n_experts", self.n_experts.to_string());
        put("capacity_factor", format!("{:?}", self.capacity_factor));
        put("n_recur", self.n_recur.to_string());
        put("k_mos", self.k_mos.to_string());
        put("share_enc_dec", self.share_enc_dec.to_string());
        put("embed_factor", self.embed_factor.to_string());
        put("n_enc_fixed", self.n_enc_fixed.to_string());
        put("kernel_width", self.kernel_width.to_string());
        put("max_position", self.max_position.to_string());
        put("ffn_activation", self.ffn_activation.to_string());
        s
    }

    /// Parses key-value text. `family` must appear first; other keys override
    /// that family's defaults.
    pub fn from_kv(text: &str) -> Result<Self> {
        let pairs = parse_kv(text)?;
        let mut cfg: Option<ModelConfig> = None;
        for (line, key, value) in pairs {
            let perr = |message: String| Error::Parse { line, message };
            if key == "family" {
                if cfg.is_some() {
                    return Err(perr("duplicate family".into()));
                }
                let fam = value.parse::<Family>().map_err(|e| perr(e.to_string()))?;
                cfg = Some(ModelConfig::new(fam, 1, 1, 1, 1, 1, 2));
                continue;
            }
            let c = cfg.as_mut().ok_or_else(|| perr("family must be the first key".into()))?;
            let num = || value.parse::<usize>().map_err(|_| perr(format!("'{}' is not a non-negative integer", value)));
            match key.as_str() {
                "n_layers_enc" => c.n_layers_enc = num()?,
                "n_layers_dec" => c.n_layers_dec = num()?,
                "d_model" => c.d_model = num()?,
                "d_ff" => c.d_ff = num()?,
                "d_kv" => c.d_kv = num()?,
                "n_heads" => c.n_heads = num()?,
                "vocab" => c.vocab = num()?,
                "n_experts" => c.n_experts = num()?,
                "capacity_factor" => {
                    c.capacity_factor = value.parse().map_err(|_| perr(format!("'{}' is not a number", value)))?
                }
                "n_recur" => c.n_recur = num()?,
                "k_mos" => c.k_mos = num()?,
                "share_enc_dec" => {
                    c.share_enc_dec = value.parse().map_err(|_| perr(format!("'{}' is not a boolean", value)))?
                }
                "embed_factor" => c.embed_factor = num()?,
                "n_enc_fixed" => c.n_enc_fixed = num()?,
                "kernel_width" => c.kernel_width = num()?,
                "max_position" => c.max_position = num()?,
                "ffn_activation" => c.ffn_activation = value.parse().map_err(|e: Error| perr(e.to_string()))?,
                other => return Err(perr(format!("unknown key '{}'", other))),
            }
        }
        let cfg = cfg.ok_or_else(|| Error::Parse { line: 0, message: "missing family".into() })?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// `(line, key, value)` triples from `key = value` lines; `#` starts a comment.
pub fn parse_kv(text: &str) -> Result<Vec<(usize, String, String)>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Parse { line: i + 1, message: format!("expected 'key = value', got '{}'", line) })?;
        out.push((i + 1, k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

/// Expert buffer rows: `ceil(capacity_factor · n / n_experts)`, at least 1.
pub fn switch_capacity(capacity_factor: f64, n_tokens: usize, n_experts: usize) -> usize {
    ((capacity_factor * n_tokens as f64 / n_experts as f64).ceil() as usize).max(1)
}
