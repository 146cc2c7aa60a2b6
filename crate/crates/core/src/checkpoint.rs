//! Checkpoint container.
//!
//! Layout: a text manifest followed by raw little-endian `f64` buffers.
//!
//! ```text
//! lctr-ckpt-v1
//! params <count>
//! <name> <d0>x<d1>x… <byte offset> <numel>
//! …
//! data
//! <payload>
//! ```
//!
//! Offsets are relative to the first payload byte.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{LctrError, Result};
use crate::tensor::{ParamStore, Tensor};

pub const VERSION_TAG: &str = "lctr-ckpt-v1";

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub numel: usize,
}

pub fn encode(store: &ParamStore) -> Vec<u8> {
    let mut header = format!("{VERSION_TAG}\nparams {}\n", store.len());
    let mut offset = 0;
    for p in store.iter() {
        let shape: Vec<String> = p.tensor.shape().iter().map(usize::to_string).collect();
        let _ = writeln!(header, "{} {} {offset} {}", p.name, shape.join("x"), p.numel());
        offset += 8 * p.numel();
    }
    header.push_str("data\n");
    let mut out = header.into_bytes();
    out.reserve(offset);
    for p in store.iter() {
        for v in p.tensor.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

fn manifest_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(LctrError::Manifest(msg.into()))
}

/// Parses the manifest and returns the entries and the payload slice.
pub fn parse(bytes: &[u8]) -> Result<(Vec<ManifestEntry>, &[u8])> {
    let mut pos = 0;
    let mut next_line = || -> Result<&str> {
        let rest = &bytes[pos..];
        let end = rest
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| LctrError::Manifest("truncated manifest".into()))?;
        pos += end + 1;
        std::str::from_utf8(&rest[..end]).map_err(|_| LctrError::Manifest("non-utf8 manifest".into()))
    };
    let tag = next_line()?;
    if tag != VERSION_TAG {
        return manifest_err(format!("unsupported version tag {tag:?}"));
    }
    let count: usize = next_line()?
        .strip_prefix("params ")
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| LctrError::Manifest("missing params count".into()))?;
    let mut entries = Vec::with_capacity(count);
    for _ in 0..count {
        let line = next_line()?;
        let f: Vec<&str> = line.split(' ').collect();
        let parsed = (|| {
            let [name, shape, offset, numel] = f.as_slice() else {
                return None;
            };
            let shape = shape
                .split('x')
                .map(|d| d.parse().ok())
                .collect::<Option<Vec<usize>>>()?;
            Some(ManifestEntry {
                name: name.to_string(),
                shape,
                offset: offset.parse().ok()?,
                numel: numel.parse().ok()?,
            })
        })();
        match parsed {
            Some(e) if e.shape.iter().product::<usize>() == e.numel => entries.push(e),
            _ => return manifest_err(format!("malformed entry {line:?}")),
        }
    }
    if next_line()? != "data" {
        return manifest_err("missing data marker");
    }
    let payload = &bytes[pos..];
    for e in &entries {
        if e.offset + 8 * e.numel > payload.len() {
            return manifest_err(format!("entry {} runs past end of payload", e.name));
        }
    }
    Ok((entries, payload))
}

/// Loads buffers into `store`, which must have exactly the same names and
/// shapes. All mismatches are reported together.
pub fn load_into(bytes: &[u8], store: &mut ParamStore) -> Result<()> {
    let (entries, payload) = parse(bytes)?;
    let mut problems = Vec::new();
    for p in store.iter() {
        match entries.iter().find(|e| e.name == p.name) {
            None => problems.push(format!("{}: missing from checkpoint", p.name)),
            Some(e) if e.shape != p.tensor.shape() => problems.push(format!(
                "{}: checkpoint {:?} vs model {:?}",
                p.name,
                e.shape,
                p.tensor.shape()
            )),
            Some(_) => {}
        }
    }
    for e in &entries {
        if store.find(&e.name).is_none() {
            problems.push(format!("{}: not present in model", e.name));
        }
    }
    if !problems.is_empty() {
        return manifest_err(format!("incompatible checkpoint: {}", problems.join("; ")));
    }
    for e in &entries {
        let id = store.find(&e.name).expect("checked above");
        let data = payload[e.offset..e.offset + 8 * e.numel]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        store.get_mut(id).tensor = Tensor::new(&e.shape, data)?.with_grad();
    }
    Ok(())
}

pub fn save(store: &ParamStore, path: &Path) -> Result<()> {
    std::fs::write(path, encode(store))?;
    Ok(())
}

pub fn load(path: &Path, store: &mut ParamStore) -> Result<()> {
    load_into(&std::fs::read(path)?, store)
}
