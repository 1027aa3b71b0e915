//! Binary checkpoint container.
//!
//! ```text
//! magic    "TSCK"
//! version  u32 = 1
//! config   u32 byte length, then UTF-8 TOML of the model config
//! count    u32 number of tensors
//! tensor   u32 name length, UTF-8 name, u32 rank, rank x u32 dims,
//!          then prod(dims) little-endian f32 values
//! ```
//!
//! All integers are little-endian. Batch-norm running statistics are stored
//! as tensors named `<layer>.running_mean` and `<layer>.running_var` after
//! the parameters.

use std::io::{Read, Write};
use std::path::Path;

use super::config::ModelConfig;
use super::model::Model;
use crate::error::{Error, FormatError, Result};
use crate::tensor::{Real, Tensor, MAX_RANK};

pub const MAGIC: [u8; 4] = *b"TSCK";
pub const VERSION: u32 = 1;

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| FormatError::Malformed(format!("{v} exceeds u32")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

fn put_tensor(out: &mut Vec<u8>, name: &str, shape: &[usize], values: impl Iterator<Item = f64>) -> Result<()> {
    put_u32(out, name.len())?;
    out.extend_from_slice(name.as_bytes());
    put_u32(out, shape.len())?;
    for &d in shape {
        put_u32(out, d)?;
    }
    for v in values {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    Ok(())
}

pub fn to_bytes<F: Real>(model: &Model<F>) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(&MAGIC);
    put_u32(&mut out, VERSION as usize)?;
    let cfg = model.config().to_toml();
    put_u32(&mut out, cfg.len())?;
    out.extend_from_slice(cfg.as_bytes());
    put_u32(&mut out, model.params().len() + 2 * model.running_stats().len())?;
    for p in model.params() {
        put_tensor(&mut out, &p.name, p.value.shape(), p.value.data().iter().map(|v| v.as_f64()))?;
    }
    for r in model.running_stats() {
        let ch = [r.mean.len()];
        put_tensor(&mut out, &format!("{}.running_mean", r.name), &ch, r.mean.iter().map(|v| v.as_f64()))?;
        put_tensor(&mut out, &format!("{}.running_var", r.name), &ch, r.var.iter().map(|v| v.as_f64()))?;
    }
    Ok(out)
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], FormatError> {
        let available = self.buf.len() - self.pos;
        if n > available {
            return Err(FormatError::Truncated {
                offset: self.pos,
                needed: n,
                available,
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> std::result::Result<usize, FormatError> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }

    fn text(&mut self, n: usize) -> std::result::Result<String, FormatError> {
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| FormatError::Malformed("invalid UTF-8".into()))
    }
}

pub fn from_bytes<F: Real>(bytes: &[u8]) -> Result<Model<F>> {
    let mut cur = Cursor { buf: bytes, pos: 0 };
    let magic = cur.take(4)?;
    if magic != MAGIC {
        return Err(FormatError::BadMagic {
            expected: MAGIC,
            found: [magic[0], magic[1], magic[2], magic[3]],
        }
        .into());
    }
    let version = cur.u32()? as u32;
    if version != VERSION {
        return Err(FormatError::BadVersion(version).into());
    }
    let cfg_len = cur.u32()?;
    let cfg = ModelConfig::from_toml(&cur.text(cfg_len)?)?;
    // Seed is irrelevant: every tensor is overwritten below.
    let mut model = Model::<F>::build(&cfg, 0)?;
    let expected = model.params().len() + 2 * model.running_stats().len();
    let count = cur.u32()?;
    if count != expected {
        return Err(FormatError::Malformed(format!(
            "{count} tensors stored, the config defines {expected}"
        ))
        .into());
    }
    for _ in 0..count {
        let name_len = cur.u32()?;
        let name = cur.text(name_len)?;
        let rank = cur.u32()?;
        if rank > MAX_RANK {
            return Err(FormatError::Malformed(format!("{name}: rank {rank}")).into());
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(cur.u32()?);
        }
        let numel = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| FormatError::Malformed(format!("{name}: dims overflow")))?;
        let raw = cur.take(numel)?;
        let values: Vec<F> = raw
            .chunks_exact(4)
            .map(|b| F::of(f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64))
            .collect();
        assign(&mut model, &name, &shape, values)?;
    }
    if cur.pos != bytes.len() {
        return Err(FormatError::TrailingBytes(bytes.len() - cur.pos).into());
    }
    Ok(model)
}

fn assign<F: Real>(model: &mut Model<F>, name: &str, shape: &[usize], values: Vec<F>) -> Result<()> {
    let mismatch = |want: &[usize]| {
        Error::from(FormatError::Malformed(format!(
            "{name}: stored shape {shape:?}, expected {want:?}"
        )))
    };
    if let Some(t) = model.param_mut(name) {
        if t.shape() != shape {
            return Err(mismatch(t.shape()));
        }
        *t = Tensor::new(shape, values)?;
        return Ok(());
    }
    for (suffix, is_mean) in [(".running_mean", true), (".running_var", false)] {
        let Some(layer) = name.strip_suffix(suffix) else { continue };
        if let Some(r) = model.running_stats_mut().iter_mut().find(|r| r.name == layer) {
            if shape != [r.mean.len()] {
                return Err(mismatch(&[r.mean.len()]));
            }
            if is_mean {
                r.mean = values;
            } else {
                r.var = values;
            }
            return Ok(());
        }
    }
    Err(FormatError::Malformed(format!("unknown tensor {name:?}")).into())
}

pub fn save<F: Real>(model: &Model<F>, path: &Path) -> Result<()> {
    let bytes = to_bytes(model)?;
    std::fs::File::create(path)?.write_all(&bytes)?;
    Ok(())
}

pub fn load<F: Real>(path: &Path) -> Result<Model<F>> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::blocks::config::{NormKind, Preset};

    #[test]
    fn round_trip_preserves_f32_model() {
        let mut cfg = ModelConfig::preset(Preset::ShiftCnn).with_width(16);
        cfg.norm = NormKind::Batch;
        cfg.num_input_layers = 2;
        let mut model = Model::<f32>::build(&cfg, 5).unwrap();
        model.running_stats_mut()[0].mean[3] = 0.25;
        let bytes = to_bytes(&model).unwrap();
        let back = from_bytes::<f32>(&bytes).unwrap();
        assert_eq!(back, model);
    }

    #[test]
    fn corrupt_input_is_rejected() {
        let cfg = ModelConfig::preset(Preset::Lstm).with_width(4);
        let bytes = to_bytes(&Model::<f32>::build(&cfg, 1).unwrap()).unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(from_bytes::<f32>(&bad), Err(Error::Format(FormatError::BadMagic { .. }))));
        assert!(matches!(
            from_bytes::<f32>(&bytes[..bytes.len() - 1]),
            Err(Error::Format(FormatError::Truncated { .. }))
        ));
        let mut long = bytes.clone();
        long.push(0);
        assert!(matches!(from_bytes::<f32>(&long), Err(Error::Format(FormatError::TrailingBytes(1)))));
    }
}
