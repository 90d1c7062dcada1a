//! Binary checkpoint:
//!
//! ```text
//! "JCLR" | version u16 | hyper: 7 × u32 | tensor count u32
//! per tensor: name len u16 | name | ndim u8 | dims u32… | values f64…
//! CRC32 of everything above, u32
//! ```
//!
//! All integers and floats are little-endian.

use std::path::Path;

use crate::encoders::{Hyper, ModelParams};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"JCLR";
pub const CHECKPOINT_VERSION: u16 = 1;

pub fn encode_checkpoint(params: &ModelParams) -> Vec<u8> {
    let mut out = Vec::with_capacity(64 + params.num_values() * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    let h = &params.hyper;
    for v in [h.num_segments, h.d, h.heads, h.gat_layers, h.trans_layers, h.d_ff, h.max_seq_len] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    let tensors = params.tensors();
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for t in &tensors {
        out.extend_from_slice(&(t.name.len() as u16).to_le_bytes());
        out.extend_from_slice(t.name.as_bytes());
        out.push(t.shape.len() as u8);
        for &dim in &t.shape {
            out.extend_from_slice(&(dim as u32).to_le_bytes());
        }
        for &v in t.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::Checkpoint("unexpected end of data".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<ModelParams> {
    if bytes.len() < MAGIC.len() + 2 + 4 || &bytes[..4] != MAGIC {
        // A truncated file that still starts with the magic is reported
        // through the checksum below.
        if bytes.len() >= 4 && &bytes[..4] == MAGIC {
            return Err(checksum_error(bytes));
        }
        return Err(Error::Checkpoint("not a checkpoint file".into()));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().unwrap());
    let computed = crc32fast::hash(body);
    if stored != computed {
        return Err(Error::Checksum { stored, computed });
    }
    let mut r = Reader { buf: body, pos: 4 };
    let version = r.u16()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint version {version} (expected {CHECKPOINT_VERSION})"
        )));
    }
    let mut hv = [0usize; 7];
    for v in &mut hv {
        *v = r.u32()? as usize;
    }
    let hyper = Hyper {
        num_segments: hv[0],
        d: hv[1],
        heads: hv[2],
        gat_layers: hv[3],
        trans_layers: hv[4],
        d_ff: hv[5],
        max_seq_len: hv[6],
    };
    hyper.validate()?;
    let mut params = ModelParams::init(0, hyper)?;
    let count = r.u32()? as usize;
    let mut targets = params.tensors_mut();
    if count != targets.len() {
        return Err(Error::Checkpoint(format!("expected {} tensors, found {count}", targets.len())));
    }
    for t in targets.iter_mut() {
        let len = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(len)?).map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?;
        if name != t.name {
            return Err(Error::Checkpoint(format!("expected tensor {}, found {name}", t.name)));
        }
        let ndim = r.u8()? as usize;
        let mut size = 1usize;
        for _ in 0..ndim {
            size *= r.u32()? as usize;
        }
        if size != t.data.len() {
            return Err(Error::ShapeMismatch(format!(
                "tensor {name} holds {size} values, expected {}",
                t.data.len()
            )));
        }
        for v in t.data.iter_mut() {
            *v = r.f64()?;
        }
    }
    drop(targets);
    if r.pos != body.len() {
        return Err(Error::Checkpoint("trailing bytes after last tensor".into()));
    }
    Ok(params)
}

fn checksum_error(bytes: &[u8]) -> Error {
    let n = bytes.len().saturating_sub(4);
    let stored = bytes
        .get(n..)
        .and_then(|t| t.try_into().ok())
        .map_or(0, u32::from_le_bytes);
    Error::Checksum {
        stored,
        computed: crc32fast::hash(&bytes[..n]),
    }
}

pub fn save_checkpoint(params: &ModelParams, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode_checkpoint(params)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<ModelParams> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}

/// Loads and checks the stored shapes against `expected`.
pub fn load_checkpoint_for(path: impl AsRef<Path>, expected: &Hyper) -> Result<ModelParams> {
    let params = load_checkpoint(path)?;
    if params.hyper != *expected {
        return Err(Error::ShapeMismatch(format!(
            "checkpoint has {:?}, configuration expects {:?}",
            params.hyper, expected
        )));
    }
    Ok(params)
}
