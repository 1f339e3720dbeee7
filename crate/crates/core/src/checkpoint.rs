//! Binary checkpoints.
//!
//! Layout (little-endian): magic `MCFK`, version `u32`, element width
//! `u32` (4 or 8), config length `u32` + config JSON, tensor count `u32`,
//! then per tensor: name length `u32`, name bytes, rank `u32`, dims `u64`
//! each, payload offset `u64`. Raw payloads follow, offsets relative to the
//! start of the payload section.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::nn::{Init, ParamSpec, ParamStore};
use crate::tensor::{Array, Real};

pub const MAGIC: &[u8; 4] = b"MCFK";
pub const VERSION: u32 = 1;

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

pub fn encode<F: Real>(model: &Model<F>) -> Result<Vec<u8>> {
    let config = serde_json::to_vec(model.config())?;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, VERSION);
    put_u32(&mut out, F::BYTES as u32);
    put_u32(&mut out, config.len() as u32);
    out.extend_from_slice(&config);
    put_u32(&mut out, model.store.len() as u32);
    let mut offset = 0u64;
    for (_, name, a) in model.store.iter() {
        put_u32(&mut out, name.len() as u32);
        out.extend_from_slice(name.as_bytes());
        put_u32(&mut out, a.shape().len() as u32);
        for &d in a.shape() {
            put_u64(&mut out, d as u64);
        }
        put_u64(&mut out, offset);
        offset += (a.len() * F::BYTES) as u64;
    }
    for (_, _, a) in model.store.iter() {
        for v in a.data() {
            (*v).write_le(&mut out);
        }
    }
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end =
            end.ok_or_else(|| Error::Format(format!("checkpoint truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Reads the header and returns the stored config without touching the
/// payload.
pub fn peek_config(bytes: &[u8]) -> Result<(ModelConfig, usize)> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Format("not a checkpoint (bad magic)".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Format(format!(
            "unsupported checkpoint version {version}"
        )));
    }
    let width = r.u32()? as usize;
    let len = r.u32()? as usize;
    let config = serde_json::from_slice(r.take(len)?)?;
    Ok((config, width))
}

pub fn decode<F: Real>(bytes: &[u8]) -> Result<Model<F>> {
    let (config, width) = peek_config(bytes)?;
    if width != F::BYTES {
        return Err(Error::Format(format!(
            "checkpoint holds {width}-byte floats, caller asked for {}",
            F::BYTES
        )));
    }
    let mut r = Reader { buf: bytes, pos: 0 };
    r.take(12)?;
    let len = r.u32()? as usize;
    r.take(len)?;
    let count = r.u32()? as usize;
    let mut entries = Vec::with_capacity(count);
    for _ in 0..count {
        let n = r.u32()? as usize;
        let name = String::from_utf8(r.take(n)?.to_vec())
            .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?;
        let rank = r.u32()? as usize;
        let shape = (0..rank)
            .map(|_| r.u64().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let offset = r.u64()? as usize;
        entries.push((name, shape, offset));
    }
    let payload = &bytes[r.pos..];
    let mut specs = Vec::with_capacity(count);
    let mut arrays = Vec::with_capacity(count);
    for (name, shape, offset) in entries {
        let n: usize = shape.iter().product();
        let raw = offset
            .checked_add(n * F::BYTES)
            .and_then(|end| payload.get(offset..end))
            .ok_or_else(|| Error::Format(format!("payload of {name} out of range")))?;
        let data = raw.chunks_exact(F::BYTES).map(F::read_le).collect();
        arrays.push(Array::new(&shape, data)?);
        specs.push(ParamSpec {
            name,
            shape,
            init: Init::Zeros,
        });
    }
    Model::from_store(&config, ParamStore::from_parts(specs, arrays)?)
}

pub fn save<F: Real>(model: &Model<F>, path: &Path) -> Result<()> {
    let bytes = encode(model)?;
    let mut f = fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

pub fn load<F: Real>(path: &Path) -> Result<Model<F>> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    decode(&bytes)
}
