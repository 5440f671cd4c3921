//! Checkpoint container.
//!
//! ```text
//! magic   b"CRCK"
//! u32     format version (1)
//! u32     metadata length, then UTF-8 JSON metadata
//! u32     parameter count
//! per parameter:
//!   u32 name length, name bytes
//!   u32 rank, rank x u32 dims
//!   rank-product x f64 values
//! [u8;32] SHA-256 of every preceding byte
//! ```
//! All integers and floats are little-endian.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::params::ParamSet;

use super::state::TrainState;

const MAGIC: &[u8; 4] = b"CRCK";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub config_hash: String,
    pub preset: String,
    /// `"backbone"` or `"head"`.
    pub stage: String,
    pub epoch: usize,
    pub state: TrainState,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub params: ParamSet,
}

fn put_u32(buf: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Format(format!("{v} does not fit in u32")))?;
    buf.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

pub fn encode(meta: &CheckpointMeta, params: &ParamSet) -> Result<Vec<u8>> {
    let mut buf = Vec::with_capacity(64 + params.scalar_count() * 8);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    let meta_json = serde_json::to_vec(meta).map_err(|e| Error::Format(e.to_string()))?;
    put_u32(&mut buf, meta_json.len())?;
    buf.extend_from_slice(&meta_json);
    put_u32(&mut buf, params.len())?;
    for p in &params.params {
        put_u32(&mut buf, p.name.len())?;
        buf.extend_from_slice(p.name.as_bytes());
        put_u32(&mut buf, p.shape.len())?;
        for d in &p.shape {
            put_u32(&mut buf, *d)?;
        }
        for v in &p.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let digest = Sha256::digest(&buf);
    buf.extend_from_slice(&digest);
    Ok(buf)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::CorruptCheckpoint("truncated".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }
}

pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < 4 + 4 + 4 + 4 + 32 {
        return Err(Error::CorruptCheckpoint("file too short".into()));
    }
    let (body, digest) = bytes.split_at(bytes.len() - 32);
    if Sha256::digest(body).as_slice() != digest {
        return Err(Error::CorruptCheckpoint("content hash mismatch".into()));
    }
    let mut r = Reader { buf: body, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::CorruptCheckpoint("bad magic".into()));
    }
    let version = r.u32()?;
    if version != VERSION as usize {
        return Err(Error::CorruptCheckpoint(format!("unsupported version {version}")));
    }
    let meta_len = r.u32()?;
    let meta: CheckpointMeta =
        serde_json::from_slice(r.take(meta_len)?).map_err(|e| Error::CorruptCheckpoint(e.to_string()))?;
    let count = r.u32()?;
    let mut params = ParamSet::default();
    for _ in 0..count {
        let name_len = r.u32()?;
        let name = String::from_utf8(r.take(name_len)?.to_vec()).map_err(|e| Error::CorruptCheckpoint(e.to_string()))?;
        let rank = r.u32()?;
        let shape = (0..rank).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let raw = r.take(n.checked_mul(8).ok_or_else(|| Error::CorruptCheckpoint("size overflow".into()))?)?;
        let data = raw.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().unwrap())).collect();
        params.push(name, shape, data);
    }
    if r.pos != body.len() {
        return Err(Error::CorruptCheckpoint("trailing bytes".into()));
    }
    Ok(Checkpoint { meta, params })
}

pub fn save_checkpoint(path: &Path, meta: &CheckpointMeta, params: &ParamSet) -> Result<()> {
    let bytes = encode(meta, params)?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Load and verify; when `expected_config_hash` is given it must match the
/// stored one.
pub fn load_checkpoint(path: &Path, expected_config_hash: Option<&str>) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let ck = decode(&bytes)?;
    if let Some(expected) = expected_config_hash {
        if ck.meta.config_hash != expected {
            return Err(Error::CorruptCheckpoint(format!(
                "config hash {} does not match expected {expected}",
                ck.meta.config_hash
            )));
        }
    }
    Ok(ck)
}
