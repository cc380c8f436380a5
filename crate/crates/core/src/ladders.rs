//! Scaling ladders: ordered model configurations of increasing size.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::config::{Family, ModelConfig};
use crate::error::{Error, Result};

pub const STANDARD_VOCAB: usize = 32128;
/// 256 bytes plus pad, end-of-sequence and one sentinel.
pub const DESK_VOCAB: usize = 259;
pub const DESK_MIXER_LEN: usize = 128;
pub const DESK_MAX_POSITION: usize = 256;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Size {
    Tiny,
    Small,
    Base,
    Large,
    XL,
}

impl Size {
    pub const ALL: [Size; 5] = [Size::Tiny, Size::Small, Size::Base, Size::Large, Size::XL];

    pub fn name(self) -> &'static str {
        match self {
            Size::Tiny => "tiny",
            Size::Small => "small",
            Size::Base => "base",
            Size::Large => "large",
            Size::XL => "xl",
        }
    }

    pub fn display_name(self) -> &'static str {
        match self {
            Size::Tiny => "Tiny",
            Size::Small => "Small",
            Size::Base => "Base",
            Size::Large => "Large",
            Size::XL => "XL",
        }
    }
}

impl fmt::Display for Size {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Size {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Size::ALL
            .into_iter()
            .find(|z| z.name().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| Error::config(format!("unknown size '{}'", s.trim())))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Protocol {
    Uniform,
    Depth,
    Width,
}

impl FromStr for Protocol {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "uniform" => Ok(Protocol::Uniform),
            "depth" => Ok(Protocol::Depth),
            "width" => Ok(Protocol::Width),
            other => Err(Error::config(format!("unknown protocol '{}'", other))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LadderEntry {
    pub label: String,
    pub config: ModelConfig,
}

/// `(size, N_L, d_ff, d_model, d_kv, N_H)`.
type Row = (Size, usize, usize, usize, usize, usize);

const VANILLA: [Row; 5] = [
    (Size::Tiny, 4, 1024, 256, 32, 4),
    (Size::Small, 6, 2048, 512, 32, 8),
    (Size::Base, 12, 3072, 768, 64, 12),
    (Size::Large, 24, 4096, 1024, 64, 16),
    (Size::XL, 24, 16384, 1024, 128, 32),
];

/// Rows plus expert count.
const SWITCH: [(Row, usize); 5] = [
    ((Size::Tiny, 4, 1024, 512, 64, 12), 32),
    ((Size::Small, 6, 2048, 512, 64, 12), 32),
    ((Size::Base, 12, 3072, 768, 64, 12), 32),
    ((Size::Large, 24, 3072, 768, 64, 12), 32),
    ((Size::XL, 48, 3072, 768, 64, 12), 128),
];

/// Rows with `N_L` holding the recurrence count.
const UNIVERSAL: [Row; 4] = [
    (Size::Tiny, 3, 1024, 128, 32, 8),
    (Size::Small, 3, 2048, 512, 32, 8),
    (Size::Base, 3, 3072, 768, 64, 12),
    (Size::Large, 3, 32768, 1024, 64, 16),
];

/// Sizes with a published result row for each family.
pub fn published_sizes(family: Family) -> &'static [Size] {
    use Size::*;
    match family {
        Family::Universal | Family::Performer | Family::DConv => &[Tiny, Small, Base, Large],
        Family::Albert => &[Small, Base, Large],
        Family::Mixer => &[Small, Base, Large, XL],
        _ => &[Tiny, Small, Base, Large, XL],
    }
}

fn from_row(family: Family, row: Row, vocab: usize) -> ModelConfig {
    let (_, n_l, d_ff, d_model, d_kv, n_heads) = row;
    ModelConfig::new(family, n_l, d_ff, d_model, d_kv, n_heads, vocab)
}

/// Configuration of `family` at a standard size.
pub fn standard_config(family: Family, size: Size) -> Result<ModelConfig> {
    let cfg = match family {
        Family::Switch => {
            let &(row, experts) = SWITCH.iter().find(|(r, _)| r.0 == size).expect("every size listed");
            let mut c = from_row(family, row, STANDARD_VOCAB);
            c.n_experts = experts;
            c
        }
        Family::Universal => {
            let row = UNIVERSAL
                .iter()
                .find(|r| r.0 == size)
                .ok_or_else(|| Error::config(format!("no {} configuration for universal", size)))?;
            let mut c = from_row(family, *row, STANDARD_VOCAB);
            c.n_recur = row.1;
            c
        }
        _ => {
            let row = VANILLA.iter().find(|r| r.0 == size).expect("every size listed");
            from_row(family, *row, STANDARD_VOCAB)
        }
    };
    cfg.validate()?;
    Ok(cfg)
}

/// The published size sequence for `family`.
pub fn standard_ladder(family: Family) -> Result<Vec<LadderEntry>> {
    published_sizes(family)
        .iter()
        .map(|&s| Ok(LadderEntry { label: s.name().to_string(), config: standard_config(family, s)? }))
        .collect()
}

/// Doubles depth (`Depth`) or FFN width (`Width`) at every step from `base`.
pub fn protocol_ladder(base: &ModelConfig, protocol: Protocol, steps: usize) -> Result<Vec<LadderEntry>> {
    if steps < 2 {
        return Err(Error::config("a protocol ladder needs at least 2 steps"));
    }
    base.validate()?;
    let mut out = Vec::with_capacity(steps);
    let mut c = base.clone();
    for i in 0..steps {
        let label = match protocol {
            Protocol::Depth => format!("depth-{}", if c.family == Family::Universal { c.n_recur } else { c.n_layers_enc }),
            Protocol::Width => format!("width-{}", c.d_ff),
            Protocol::Uniform => return Err(Error::config("uniform scaling is the standard ladder")),
        };
        out.push(LadderEntry { label, config: c.clone() });
        if i + 1 < steps {
            match protocol {
                Protocol::Depth => {
                    c.n_layers_enc *= 2;
                    c.n_layers_dec *= 2;
                    if c.family == Family::Universal {
                        c.n_recur *= 2;
                    }
                }
                Protocol::Width => c.d_ff *= 2,
                Protocol::Uniform => unreachable!(),
            }
        }
    }
    Ok(out)
}

const DESK: [Row; 3] = [
    (Size::Tiny, 2, 256, 64, 16, 4),
    (Size::Small, 3, 384, 96, 24, 4),
    (Size::Base, 4, 640, 160, 40, 4),
];

/// Three sizes trainable in minutes on a byte vocabulary.
pub fn desk_ladder(family: Family) -> Result<Vec<LadderEntry>> {
    DESK.iter()
        .map(|&row| {
            let mut c = from_row(family, row, DESK_VOCAB);
            c.n_experts = 4;
            c.n_recur = row.1;
            c.n_enc_fixed = DESK_MIXER_LEN;
            c.max_position = DESK_MAX_POSITION;
            c.validate()?;
            Ok(LadderEntry { label: format!("desk-{}", row.0.name()), config: c })
        })
        .collect()
}

/// Resolves `name` as a standard size or a `desk-*` label.
pub fn named_config(family: Family, name: &str) -> Result<ModelConfig> {
    let key = name.trim().to_ascii_lowercase();
    if key.starts_with("desk-") {
        return desk_ladder(family)?
            .into_iter()
            .find(|e| e.label == key)
            .map(|e| e.config)
            .ok_or_else(|| Error::config(format!("unknown desk size '{}'", name)));
    }
    standard_config(family, key.parse()?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cost::count_params;

    fn params(c: &ModelConfig) -> u64 {
        count_params(c).unwrap().params_total
    }

    #[test]
    fn vanilla_ladder_matches_published_sizes() {
        let l = standard_ladder(Family::Transformer).unwrap();
        assert_eq!(l.len(), 5);
        let p: Vec<u64> = l.iter().map(|e| params(&e.config)).collect();
        assert_eq!(&p[..2], &[13_997_824, 51_069_440]);
        for (&got, want) in p[2..].iter().zip([223e6, 738e6, 2.9e9]) {
            assert!((got as f64 / want - 1.0).abs() < 0.02, "{got} vs {want}");
        }
    }

    #[test]
    fn switch_and_universal_extremes() {
        let xl = standard_config(Family::Switch, Size::XL).unwrap();
        assert_eq!((xl.n_layers_enc, xl.n_experts), (48, 128));
        assert!((params(&xl) as f64 / 30e9 - 1.0).abs() < 0.05);
        let ut = standard_config(Family::Universal, Size::Large).unwrap();
        assert_eq!(ut.d_ff, 32768);
        assert!(standard_config(Family::Universal, Size::XL).is_err());
    }

    #[test]
    fn protocols_double_one_axis() {
        let base = ModelConfig::new(Family::Transformer, 6, 2048, 512, 64, 8, STANDARD_VOCAB);
        let depth = protocol_ladder(&base, Protocol::Depth, 3).unwrap();
        let n: Vec<usize> = depth.iter().map(|e| e.config.n_layers_enc).collect();
        assert_eq!(n, vec![6, 12, 24]);
        let width = protocol_ladder(&base, Protocol::Width, 3).unwrap();
        let f: Vec<usize> = width.iter().map(|e| e.config.d_ff).collect();
        assert_eq!(f, vec![2048, 4096, 8192]);
        for l in [depth, width] {
            let p: Vec<u64> = l.iter().map(|e| params(&e.config)).collect();
            assert!(p.windows(2).all(|w| w[0] < w[1]));
        }
        assert!(protocol_ladder(&base, Protocol::Depth, 1).is_err());
    }

    #[test]
    fn desk_ladders_are_small_and_increasing() {
        for fam in Family::ALL {
            let l = desk_ladder(fam).unwrap();
            assert_eq!(l.len(), 3);
            let p: Vec<u64> = l.iter().map(|e| params(&e.config)).collect();
            assert!(p.windows(2).all(|w| w[0] < w[1]), "{fam}: {p:?}");
            assert!(p[2] < 6_000_000, "{fam}: {p:?}");
        }
        let v: Vec<u64> = desk_ladder(Family::Transformer).unwrap().iter().map(|e| params(&e.config)).collect();
        assert!((150_000..400_000).contains(&v[0]), "{v:?}");
        assert!((500_000..1_200_000).contains(&v[1]), "{v:?}");
        assert!((2_000_000..4_500_000).contains(&v[2]), "{v:?}");
    }

    #[test]
    fn names_resolve() {
        assert_eq!(named_config(Family::Glu, "Base").unwrap().d_model, 768);
        assert_eq!(named_config(Family::Glu, "desk-small").unwrap().d_model, 96);
        assert!(named_config(Family::Glu, "huge").is_err());
    }
}
