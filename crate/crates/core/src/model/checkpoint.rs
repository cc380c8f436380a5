//! Single-file binary checkpoints.
//!
//! Byte layout, all integers little-endian:
//!
//! ```text
//! magic    8 bytes  "ARCHSCK\0"
//! version  u32
//! dtype    u8       0 = float32, 1 = float64
//! config   u32 length + UTF-8 key-value text
//! metadata u32 length + UTF-8 key-value text
//! count    u32      number of tensors
//! per tensor:
//!   name   u32 length + UTF-8
//!   ndim   u32
//!   dims   ndim × u64
//!   data   numel × dtype width
//! ```

use std::collections::BTreeMap;
use std::io::{Read, Write};

use super::{Architecture, Model};
use crate::config::{parse_kv, ModelConfig};
use crate::error::{Error, Result};
use crate::tensor::{DType, Float, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"ARCHSCK\0";
pub const CHECKPOINT_VERSION: u32 = 1;

/// A model plus free-form string metadata.
#[derive(Clone, Debug)]
pub struct Checkpoint<T: Float> {
    pub model: Model<T>,
    pub metadata: BTreeMap<String, String>,
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    put_u32(out, s.len() as u32);
    out.extend_from_slice(s.as_bytes());
}

pub fn write_checkpoint<T: Float, W: Write>(mut w: W, ckpt: &Checkpoint<T>) -> Result<()> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    put_u32(&mut out, CHECKPOINT_VERSION);
    out.push(T::DTYPE.code());
    put_str(&mut out, &ckpt.model.config().to_kv());
    let meta: String = ckpt.metadata.iter().map(|(k, v)| format!("{} = {}\n", k, v)).collect();
    put_str(&mut out, &meta);
    put_u32(&mut out, ckpt.model.params.len() as u32);
    for (name, t) in ckpt.model.named_params() {
        put_str(&mut out, name);
        put_u32(&mut out, t.ndim() as u32);
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in t.data() {
            v.write_le(&mut out);
        }
    }
    w.write_all(&out)?;
    Ok(())
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Format(format!("truncated at byte {}", self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Format("invalid UTF-8".into()))
    }
}

/// Reads a checkpoint stored at any precision, converting values to `T`.
pub fn read_checkpoint<T: Float, R: Read>(mut r: R) -> Result<Checkpoint<T>> {
    let mut buf = Vec::new();
    r.read_to_end(&mut buf)?;
    let mut c = Cursor { buf: &buf, pos: 0 };
    if c.take(8)? != CHECKPOINT_MAGIC {
        return Err(Error::Format("bad magic".into()));
    }
    let version = c.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!("unsupported version {}", version)));
    }
    let dtype = DType::from_code(c.take(1)?[0]).ok_or_else(|| Error::Format("unknown dtype".into()))?;
    let config = ModelConfig::from_kv(&c.string()?)?;
    let metadata = parse_kv(&c.string()?)?.into_iter().map(|(_, k, v)| (k, v)).collect();
    let count = c.u32()? as usize;
    let arch = Architecture::build(&config)?;
    if count != arch.layout.len() {
        return Err(Error::Format(format!("{} tensors, layout expects {}", count, arch.layout.len())));
    }
    let mut params = Vec::with_capacity(count);
    let width = dtype.byte_width();
    for i in 0..count {
        let name = c.string()?;
        let ndim = c.u32()? as usize;
        let shape = (0..ndim).map(|_| c.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let numel: usize = shape.iter().product();
        let raw = c.take(numel * width)?;
        let values: Vec<T> = raw
            .chunks_exact(width)
            .map(|b| match dtype {
                DType::Float32 => T::lit(f32::read_le(b) as f64),
                DType::Float64 => T::lit(f64::read_le(b)),
            })
            .collect();
        let spec = &arch.layout.specs()[i];
        if spec.name != name {
            return Err(Error::Format(format!("tensor {} is '{}', expected '{}'", i, name, spec.name)));
        }
        params.push(Tensor::new(shape, values)?);
    }
    if c.pos != buf.len() {
        return Err(Error::Format(format!("{} trailing bytes", buf.len() - c.pos)));
    }
    arch.layout.check_values(&params)?;
    Ok(Checkpoint { model: Model { arch, params }, metadata })
}
