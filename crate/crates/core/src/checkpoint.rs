//! Checkpoint serialization.
//!
//! Layout, all integers little-endian:
//!   magic "RDVQCKPT" (8 bytes)
//!   version: u32 (currently 1)
//!   param count: u32
//!   per parameter, in lexicographic name order:
//!     name_len: u16, name: UTF-8 bytes
//!     rank: u8, dims: rank x u32
//!     data: numel x f64 (raw LE bits)
//! Loading a checkpoint and saving it again is byte-identical.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::params::ParamSet;
use crate::tensor::Tensor;

pub const CKPT_MAGIC: &[u8; 8] = b"RDVQCKPT";
pub const CKPT_VERSION: u32 = 1;

pub fn serialize_params(params: &ParamSet) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(CKPT_MAGIC);
    out.extend_from_slice(&CKPT_VERSION.to_le_bytes());
    let count = u32::try_from(params.len())
        .map_err(|_| Error::contract("checkpoint: too many parameters"))?;
    out.extend_from_slice(&count.to_le_bytes());
    for (name, t) in params.iter() {
        let name_len = u16::try_from(name.len())
            .map_err(|_| Error::contract(format!("checkpoint: name too long: '{name}'")))?;
        out.extend_from_slice(&name_len.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        let rank = u8::try_from(t.rank())
            .map_err(|_| Error::contract("checkpoint: rank exceeds u8"))?;
        out.push(rank);
        for &d in t.shape() {
            let d = u32::try_from(d).map_err(|_| Error::contract("checkpoint: dim exceeds u32"))?;
            out.extend_from_slice(&d.to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn deserialize_params(bytes: &[u8]) -> Result<ParamSet> {
    let mut r = Cursor { bytes, pos: 0 };
    let magic = r.take(8)?;
    if magic != CKPT_MAGIC {
        return Err(Error::format("checkpoint: bad magic"));
    }
    let version = r.u32()?;
    if version != CKPT_VERSION {
        return Err(Error::format(format!(
            "checkpoint: unsupported version {version}"
        )));
    }
    let count = r.u32()?;
    let mut params = ParamSet::new();
    let mut prev_name: Option<String> = None;
    for _ in 0..count {
        let name_len = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| Error::format("checkpoint: parameter name is not UTF-8"))?
            .to_string();
        if let Some(prev) = &prev_name {
            if *prev >= name {
                return Err(Error::format("checkpoint: names out of order"));
            }
        }
        let rank = r.u8()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32()? as usize);
        }
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        for _ in 0..numel {
            data.push(f64::from_le_bytes(r.take(8)?.try_into().unwrap()));
        }
        params.insert(name.clone(), Tensor::new(shape, data)?);
        prev_name = Some(name);
    }
    if r.pos != bytes.len() {
        return Err(Error::format("checkpoint: trailing bytes"));
    }
    Ok(params)
}

pub fn save_params(path: &Path, params: &ParamSet) -> Result<()> {
    let bytes = serialize_params(params)?;
    let mut f = std::fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

pub fn load_params(path: &Path) -> Result<ParamSet> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    deserialize_params(&bytes)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::format("checkpoint: truncated"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
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
}
