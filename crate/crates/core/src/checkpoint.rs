//! Versioned binary checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "CATU"                         magic
//! u32  version (= 1)
//! u32  config length, then the config as key-sorted JSON
//! u32  parameter count
//! per parameter:
//!   u16 name length, name bytes (UTF-8)
//!   u8  rank, then u32 per dimension
//!   f32 values, row-major
//! ```

use std::fs;
use std::path::Path;

use indexmap::IndexMap;

use crate::error::{Error, Result};
use crate::model::{CatUNetConfig, CatUNetModel};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"CATU";
pub const VERSION: u32 = 1;

/// Canonical config text: compact JSON with keys in sorted order.
pub fn canonical_config(config: &CatUNetConfig) -> String {
    // serde_json maps are BTreeMap-backed, so going through Value sorts keys.
    let value = serde_json::to_value(config).expect("config serializes");
    value.to_string()
}

pub fn to_bytes(model: &CatUNetModel) -> Result<Vec<u8>> {
    let config = canonical_config(model.config());
    let mut out = Vec::with_capacity(64 + config.len() + 4 * model.param_count());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&len_u32(config.len(), "config")?.to_le_bytes());
    out.extend_from_slice(config.as_bytes());
    out.extend_from_slice(&len_u32(model.params().len(), "parameter count")?.to_le_bytes());
    for (name, tensor) in model.params() {
        let name_len = u16::try_from(name.len())
            .map_err(|_| Error::Checkpoint(format!("parameter name `{name}` too long")))?;
        out.extend_from_slice(&name_len.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        let rank = u8::try_from(tensor.rank())
            .map_err(|_| Error::Checkpoint(format!("`{name}` has rank {}", tensor.rank())))?;
        out.push(rank);
        for &d in tensor.shape() {
            out.extend_from_slice(&len_u32(d, "dimension")?.to_le_bytes());
        }
        for v in tensor.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

fn len_u32(n: usize, what: &str) -> Result<u32> {
    u32::try_from(n).map_err(|_| Error::Checkpoint(format!("{what} {n} exceeds u32")))
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| {
                Error::Checkpoint(format!(
                    "truncated while reading {what} at byte {}",
                    self.pos
                ))
            })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}

pub fn from_bytes(buf: &[u8]) -> Result<CatUNetModel> {
    let mut r = Reader { buf, pos: 0 };
    let magic = r.take(4, "magic")?;
    if magic != MAGIC {
        return Err(Error::Checkpoint(format!(
            "bad magic {magic:?}, expected {MAGIC:?}"
        )));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let config_len = r.u32("config length")? as usize;
    let config_text = std::str::from_utf8(r.take(config_len, "config")?)
        .map_err(|e| Error::Checkpoint(format!("config is not UTF-8: {e}")))?;
    let config: CatUNetConfig =
        serde_json::from_str(config_text).map_err(|e| Error::Checkpoint(format!("config: {e}")))?;

    let count = r.u32("parameter count")? as usize;
    let mut params = IndexMap::with_capacity(count.min(1024));
    for _ in 0..count {
        let name_len = r.u16("name length")? as usize;
        let name = std::str::from_utf8(r.take(name_len, "name")?)
            .map_err(|e| Error::Checkpoint(format!("parameter name is not UTF-8: {e}")))?
            .to_owned();
        let rank = r.u8("rank")? as usize;
        let shape = (0..rank)
            .map(|_| r.u32("dimension").map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let len = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::Checkpoint(format!("`{name}` shape {shape:?} overflows")))?;
        let bytes = r.take(
            len.checked_mul(4)
                .ok_or_else(|| Error::Checkpoint(format!("`{name}` too large")))?,
            "values",
        )?;
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        if params
            .insert(name.clone(), Tensor::new(shape, data)?)
            .is_some()
        {
            return Err(Error::Checkpoint(format!("duplicate parameter `{name}`")));
        }
    }
    if r.pos != buf.len() {
        return Err(Error::Checkpoint(format!(
            "{} trailing bytes",
            buf.len() - r.pos
        )));
    }
    CatUNetModel::from_parts(config, params).map_err(|e| Error::Checkpoint(e.to_string()))
}

pub fn save(model: &CatUNetModel, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, to_bytes(model)?).map_err(|e| Error::io(path, e))
}

pub fn load(path: impl AsRef<Path>) -> Result<CatUNetModel> {
    let path = path.as_ref();
    let buf = fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&buf)
}
