//! `LVCE1` checkpoint files: magic, config JSON, then named f32 arrays.
//!
//! ```text
//! "LVCE1"
//! u32 header_len, header JSON {"format_version", "vnet", "meta"}
//! u32 array_count
//! per array: u32 name_len, name, u32 ndim, u32 dims[ndim], f32 data (little endian)
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Tensor, VNetConfig, VNetModel};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 5] = b"LVCE1";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    format_version: u32,
    vnet: VNetConfig,
    #[serde(default)]
    meta: serde_json::Value,
}

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::invalid(format!("{v} does not fit the checkpoint u32 field")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

pub fn encode_checkpoint(model: &VNetModel<f32>, meta: &serde_json::Value) -> Result<Vec<u8>> {
    let header = serde_json::to_vec(&Header {
        format_version: FORMAT_VERSION,
        vnet: model.config().clone(),
        meta: meta.clone(),
    })?;
    let mut out = Vec::with_capacity(64 + header.len() + 4 * model.param_count());
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, header.len())?;
    out.extend_from_slice(&header);
    put_u32(&mut out, model.params().len())?;
    for p in model.params() {
        put_u32(&mut out, p.name.len())?;
        out.extend_from_slice(p.name.as_bytes());
        put_u32(&mut out, p.value.shape().len())?;
        for &d in p.value.shape() {
            put_u32(&mut out, d)?;
        }
        for v in p.value.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, field: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::format(field, "file truncated"))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, field: &str) -> Result<usize> {
        let b = self.take(4, field)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }
}

/// Decode a checkpoint into a model and its free-form metadata.
pub fn decode_checkpoint(bytes: &[u8]) -> Result<(VNetModel<f32>, serde_json::Value)> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(MAGIC.len(), "magic")? != MAGIC {
        return Err(Error::format("magic", "not an LVCE1 checkpoint"));
    }
    let hlen = r.u32("header")?;
    let header: Header =
        serde_json::from_slice(r.take(hlen, "header")?).map_err(|e| Error::format("header", e.to_string()))?;
    if header.format_version != FORMAT_VERSION {
        return Err(Error::format(
            "header",
            format!("unsupported format version {}", header.format_version),
        ));
    }
    let count = r.u32("parameters")?;
    let mut named = Vec::with_capacity(count.min(1024));
    for _ in 0..count {
        let nlen = r.u32("parameters")?;
        let name = std::str::from_utf8(r.take(nlen, "parameters")?)
            .map_err(|_| Error::format("parameters", "array name is not UTF-8"))?
            .to_string();
        let ndim = r.u32("parameters")?;
        if ndim > 8 {
            return Err(Error::format("parameters", format!("{name} has {ndim} dimensions")));
        }
        let shape = (0..ndim).map(|_| r.u32("parameters")).collect::<Result<Vec<_>>>()?;
        let n = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| Error::format("parameters", format!("{name} is too large")))?;
        let raw = r.take(n.checked_mul(4).unwrap_or(usize::MAX), "parameters")?;
        let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
        named.push((name, Tensor::new(shape, data)?));
    }
    if r.pos != bytes.len() {
        return Err(Error::format("trailing", format!("{} unexpected bytes after the last array", bytes.len() - r.pos)));
    }
    Ok((VNetModel::from_params(header.vnet, named)?, header.meta))
}

pub fn save_checkpoint(path: &Path, model: &VNetModel<f32>, meta: &serde_json::Value) -> Result<()> {
    let bytes = encode_checkpoint(model, meta)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<(VNetModel<f32>, serde_json::Value)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}
