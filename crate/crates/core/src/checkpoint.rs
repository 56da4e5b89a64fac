//! "SFCK" checkpoint format.
//!
//! All integers are little-endian. Layout:
//!
//! | field            | type                         |
//! |------------------|------------------------------|
//! | magic            | `b"SFCK"`                    |
//! | version          | u32 (= [`VERSION`])          |
//! | config length    | u32                          |
//! | config           | UTF-8 JSON of `ModelConfig`  |
//! | tensor count     | u32                          |
//! | per tensor       | name length u32, UTF-8 name, rank u32, rank × u64 dims, payload byte offset u64 |
//! | payload length   | u64 (bytes)                  |
//! | payload CRC-32   | u32 (IEEE, over the payload) |
//! | payload          | f32 little-endian values, tensors in directory order |
//!
//! Tensors are written in name order, so saving is deterministic.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelParams};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"SFCK";
pub const VERSION: u32 = 1;

/// Serialises `params` together with the config that produced them.
pub fn encode(params: &ModelParams, cfg: &ModelConfig) -> Result<Vec<u8>> {
    params.check(cfg)?;
    let config = serde_json::to_vec(cfg)?;
    let mut header = Vec::new();
    header.extend_from_slice(MAGIC);
    header.extend_from_slice(&VERSION.to_le_bytes());
    header.extend_from_slice(&len_u32(config.len())?.to_le_bytes());
    header.extend_from_slice(&config);
    header.extend_from_slice(&len_u32(params.len())?.to_le_bytes());
    let mut payload = Vec::with_capacity(params.num_parameters() * 4);
    for (name, t) in params.iter() {
        header.extend_from_slice(&len_u32(name.len())?.to_le_bytes());
        header.extend_from_slice(name.as_bytes());
        header.extend_from_slice(&len_u32(t.rank())?.to_le_bytes());
        for &d in t.shape() {
            header.extend_from_slice(&(d as u64).to_le_bytes());
        }
        header.extend_from_slice(&(payload.len() as u64).to_le_bytes());
        for v in t.data() {
            payload.extend_from_slice(&v.to_le_bytes());
        }
    }
    header.extend_from_slice(&(payload.len() as u64).to_le_bytes());
    header.extend_from_slice(&crc32fast::hash(&payload).to_le_bytes());
    header.extend_from_slice(&payload);
    Ok(header)
}

fn len_u32(n: usize) -> Result<u32> {
    u32::try_from(n).map_err(|_| Error::InvalidArgument(format!("length {n} does not fit the SFCK header")))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or(Error::Truncated {
            needed: self.pos.saturating_add(n),
            found: self.bytes.len(),
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn usize(&mut self) -> Result<usize> {
        let v = self.u64()?;
        usize::try_from(v).map_err(|_| malformed(format!("value {v} exceeds the address space")))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|e| malformed(format!("tensor name is not UTF-8: {e}")))
    }
}

fn malformed(reason: impl Into<String>) -> Error {
    Error::Malformed {
        what: "SFCK checkpoint".into(),
        reason: reason.into(),
    }
}

/// Decoded but not yet validated contents.
struct Raw {
    config: ModelConfig,
    tensors: BTreeMap<String, Tensor>,
}

fn decode_raw(bytes: &[u8]) -> Result<Raw> {
    let mut r = Reader { bytes, pos: 0 };
    let magic = r.take(4).map_err(|_| Error::BadMagic {
        expected: "SFCK".into(),
        found: String::from_utf8_lossy(bytes).into_owned(),
    })?;
    if magic != MAGIC {
        return Err(Error::BadMagic {
            expected: "SFCK".into(),
            found: String::from_utf8_lossy(magic).into_owned(),
        });
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let clen = r.u32()? as usize;
    let config: ModelConfig = serde_json::from_slice(r.take(clen)?)?;
    let count = r.u32()? as usize;
    let mut dir = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let name = r.string()?;
        let rank = r.u32()? as usize;
        if rank > 8 {
            return Err(malformed(format!("tensor `{name}` has rank {rank}")));
        }
        let shape = (0..rank).map(|_| r.usize()).collect::<Result<Vec<_>>>()?;
        let offset = r.usize()?;
        dir.push((name, shape, offset));
    }
    let payload_len = r.usize()?;
    let stored = r.u32()?;
    let payload = r.take(payload_len)?;
    if r.pos != bytes.len() {
        return Err(malformed(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    let computed = crc32fast::hash(payload);
    if computed != stored {
        return Err(Error::ChecksumMismatch { stored, computed });
    }
    let mut tensors = BTreeMap::new();
    for (name, shape, offset) in dir {
        let n = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| malformed(format!("tensor `{name}` is too large")))?;
        let end = offset
            .checked_add(n)
            .filter(|&e| e <= payload.len())
            .ok_or_else(|| malformed(format!("tensor `{name}` lies outside the payload")))?;
        let data = payload[offset..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        let t = Tensor::new(shape, data)?;
        if tensors.insert(name.clone(), t).is_some() {
            return Err(malformed(format!("duplicate tensor `{name}`")));
        }
    }
    Ok(Raw { config, tensors })
}

/// Decodes a checkpoint and validates it against its embedded config.
pub fn decode(bytes: &[u8]) -> Result<(ModelParams, ModelConfig)> {
    let raw = decode_raw(bytes)?;
    let params = ModelParams::from_map(&raw.config, raw.tensors)?;
    Ok((params, raw.config))
}

/// Decodes a checkpoint's tensors and validates them against `cfg` instead of
/// the embedded config; mismatches name the offending tensor.
pub fn decode_into(bytes: &[u8], cfg: &ModelConfig) -> Result<ModelParams> {
    ModelParams::from_map(cfg, decode_raw(bytes)?.tensors)
}

pub fn save(path: &Path, params: &ModelParams, cfg: &ModelConfig) -> Result<()> {
    let bytes = encode(params, cfg)?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<(ModelParams, ModelConfig)> {
    decode(&fs::read(path).map_err(|e| Error::io(path, e))?)
}

pub fn load_into(path: &Path, cfg: &ModelConfig) -> Result<ModelParams> {
    decode_into(&fs::read(path).map_err(|e| Error::io(path, e))?, cfg)
}
