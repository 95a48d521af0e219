//! Binary container shared by checkpoints and trajectory exports.
//!
//! ```text
//! "TCNV" | u32 LE version | u64 LE header length | UTF-8 JSON header | f32 LE blobs
//! ```
//!
//! The header is a JSON object whose `arrays` member lists every blob as
//! `{name, shape, offset}`; `offset` counts bytes from the start of the blob
//! section and blobs are stored contiguously in manifest order.

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

pub const MAGIC: &[u8; 4] = b"TCNV";
pub const VERSION: u32 = 1;
/// Magic, version and header length.
pub const PREAMBLE_LEN: usize = 16;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArrayEntry {
    pub name: String,
    pub shape: [usize; 4],
    pub offset: u64,
}

impl ArrayEntry {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn byte_len(&self) -> usize {
        self.numel() * 4
    }
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

/// Writes `header` (a JSON object without `arrays`) and the named arrays.
pub fn encode(mut header: Map<String, Value>, arrays: &[(&str, &Tensor<f32>)]) -> Result<Vec<u8>> {
    let mut entries = Vec::with_capacity(arrays.len());
    let mut offset = 0u64;
    for (name, t) in arrays {
        entries.push(ArrayEntry {
            name: name.to_string(),
            shape: t.shape().dims(),
            offset,
        });
        offset += (t.len() * 4) as u64;
    }
    header.insert(
        "arrays".into(),
        serde_json::to_value(&entries).map_err(|e| bad(e.to_string()))?,
    );
    let text = serde_json::to_vec(&Value::Object(header)).map_err(|e| bad(e.to_string()))?;
    let mut out = Vec::with_capacity(PREAMBLE_LEN + text.len() + offset as usize);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(text.len() as u64).to_le_bytes());
    out.extend_from_slice(&text);
    for (_, t) in arrays {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

/// Parses the preamble and header only.
pub fn read_header(bytes: &[u8]) -> Result<(Map<String, Value>, Vec<ArrayEntry>, usize)> {
    if bytes.len() < PREAMBLE_LEN {
        return Err(bad(format!("truncated preamble ({} bytes)", bytes.len())));
    }
    if &bytes[..4] != MAGIC {
        return Err(bad("bad magic, not a TCNV file"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(bad(format!("unsupported version {version}, expected {VERSION}")));
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
    let end = (PREAMBLE_LEN as u64)
        .checked_add(hlen)
        .filter(|&e| e <= bytes.len() as u64)
        .ok_or_else(|| bad(format!("truncated header: declares {hlen} bytes")))? as usize;
    let mut header: Map<String, Value> =
        serde_json::from_slice(&bytes[PREAMBLE_LEN..end]).map_err(|e| bad(format!("header: {e}")))?;
    let arrays = header.remove("arrays").ok_or_else(|| bad("header has no arrays manifest"))?;
    let arrays: Vec<ArrayEntry> = serde_json::from_value(arrays).map_err(|e| bad(format!("arrays manifest: {e}")))?;
    Ok((header, arrays, end))
}

/// Parses a whole container, checking that the manifest tiles the blob
/// section exactly.
pub fn decode(bytes: &[u8]) -> Result<(Map<String, Value>, Vec<(String, Tensor<f32>)>)> {
    let (header, entries, start) = read_header(bytes)?;
    let blobs = &bytes[start..];
    let mut expected = 0u64;
    let mut arrays = Vec::with_capacity(entries.len());
    for e in &entries {
        if e.offset != expected {
            return Err(bad(format!("array {}: offset {} but expected {expected}", e.name, e.offset)));
        }
        let len = e.byte_len();
        let from = expected as usize;
        let chunk = blobs
            .get(from..from + len)
            .ok_or_else(|| bad(format!("truncated data in array {}", e.name)))?;
        let data = chunk
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
            .collect();
        arrays.push((e.name.clone(), Tensor::from_vec(Shape::from_dims(e.shape), data)?));
        expected += len as u64;
    }
    if expected as usize != blobs.len() {
        return Err(bad(format!(
            "manifest covers {expected} data bytes but file has {}",
            blobs.len()
        )));
    }
    Ok((header, arrays))
}
