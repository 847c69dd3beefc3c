//! Binary checkpoints.
//!
//! Layout, little-endian throughout:
//!
//! ```text
//! magic "MOERCKPT" | u32 version | u32 len, model config text
//! u32 count | count x (u32 name len, name, u32 rank, rank x u32 dim, f32 data)
//! u32 CRC-32 of every preceding byte
//! ```

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::net::{build_model, Model, ModelConfig};
use crate::params::ParamStore;

const WHAT: &str = "checkpoint";
pub const MAGIC: &[u8; 8] = b"MOERCKPT";
pub const VERSION: u32 = 1;
const MAX_NAME: usize = 1024;
const MAX_RANK: usize = 8;

#[derive(Clone, Debug, PartialEq)]
pub struct Record {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: ModelConfig,
    pub records: Vec<Record>,
}

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::InvalidArgument(format!("{v} does not fit a u32 field")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

impl Checkpoint {
    pub fn capture(model: &ModelConfig, ps: &ParamStore<f32>) -> Self {
        let records = ps
            .iter()
            .map(|(_, p)| Record {
                name: p.name.clone(),
                shape: p.tensor.shape().to_vec(),
                data: p.tensor.data().to_vec(),
            })
            .collect();
        Self { model: model.clone(), records }
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let mut out = MAGIC.to_vec();
        out.extend_from_slice(&VERSION.to_le_bytes());
        let text = self.model.to_text();
        put_u32(&mut out, text.len())?;
        out.extend_from_slice(text.as_bytes());
        put_u32(&mut out, self.records.len())?;
        for r in &self.records {
            put_u32(&mut out, r.name.len())?;
            out.extend_from_slice(r.name.as_bytes());
            put_u32(&mut out, r.shape.len())?;
            for &d in &r.shape {
                put_u32(&mut out, d)?;
            }
            for v in &r.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() + 8 || &bytes[..MAGIC.len()] != MAGIC {
            return Err(Error::format(WHAT, "missing magic"));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(tail.try_into().unwrap());
        if crc32fast::hash(body) != stored {
            return Err(Error::format(WHAT, "checksum mismatch"));
        }
        let mut r = Reader { bytes: body, pos: MAGIC.len() };
        let version = r.u32()?;
        if version != VERSION as usize {
            return Err(Error::format(WHAT, format!("unsupported version {version}")));
        }
        let len = r.u32()?;
        let text = std::str::from_utf8(r.take(len)?).map_err(|_| Error::format(WHAT, "config is not UTF-8"))?;
        let model = ModelConfig::parse(text)?;
        let count = r.u32()?;
        let mut records = Vec::new();
        for _ in 0..count {
            let len = r.u32()?;
            if len > MAX_NAME {
                return Err(Error::format(WHAT, format!("name of {len} bytes")));
            }
            let name =
                std::str::from_utf8(r.take(len)?).map_err(|_| Error::format(WHAT, "name is not UTF-8"))?.to_string();
            let rank = r.u32()?;
            if rank > MAX_RANK {
                return Err(Error::format(WHAT, format!("{name}: rank {rank}")));
            }
            let shape = (0..rank).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
            let numel = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
            let nbytes = numel
                .and_then(|n| n.checked_mul(4))
                .ok_or_else(|| Error::format(WHAT, format!("{name}: shape overflows")))?;
            let data = r.take(nbytes)?.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
            records.push(Record { name, shape, data });
        }
        if r.pos != body.len() {
            return Err(Error::format(WHAT, format!("{} trailing bytes", body.len() - r.pos)));
        }
        Ok(Self { model, records })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.encode()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::decode(&fs::read(path).map_err(|e| Error::io(path, e))?)
    }

    /// Copies the records into `ps`, which must hold the same names and shapes
    /// in the same order.
    pub fn apply(&self, ps: &mut ParamStore<f32>) -> Result<()> {
        if ps.len() != self.records.len() {
            return Err(Error::format(WHAT, format!("{} records for {} parameters", self.records.len(), ps.len())));
        }
        for (p, r) in ps.iter_mut().zip(&self.records) {
            if p.name != r.name || p.tensor.shape() != r.shape.as_slice() {
                return Err(Error::format(
                    WHAT,
                    format!(
                        "record {} {:?} does not match parameter {} {:?}",
                        r.name,
                        r.shape,
                        p.name,
                        p.tensor.shape()
                    ),
                ));
            }
            p.tensor.data_mut().copy_from_slice(&r.data);
        }
        Ok(())
    }

    /// Rebuilds the network described by the checkpoint with its weights.
    pub fn restore(&self) -> Result<(Model, ParamStore<f32>)> {
        let mut ps = ParamStore::new(0);
        let model = build_model(&self.model, &mut ps)?;
        self.apply(&mut ps)?;
        Ok((model, ps))
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::format(WHAT, format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }
}
