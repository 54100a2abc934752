//! Single-file model checkpoints.
//!
//! Layout, all integers and floats little-endian:
//!
//! ```text
//! magic        8 bytes   "M2ANETCK"
//! version      u32       1
//! config_len   u64
//! config       config_len bytes of JSON (ModelConfig)
//! entry_count  u32
//! entries:
//!   kind       u8        0 = parameter, 1 = norm statistics
//!   name_len   u32
//!   name       name_len bytes of UTF-8
//!   dims       4 × u64   (statistics: [2, channels, 1, 1], mean then var)
//!   data       numel × f64
//! ```
//!
//! Floats are stored as their raw bit patterns, so a round trip is exact.

use std::collections::HashSet;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{M2ANet, ModelConfig};
use crate::tensor::{numel, Shape};

pub const MAGIC: &[u8; 8] = b"M2ANETCK";
pub const VERSION: u32 = 1;

const KIND_PARAM: u8 = 0;
const KIND_STATS: u8 = 1;

fn put_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn put_u64(buf: &mut Vec<u8>, v: u64) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn put_entry(
    buf: &mut Vec<u8>,
    kind: u8,
    name: &str,
    shape: Shape,
    values: impl Iterator<Item = f64>,
) {
    buf.push(kind);
    put_u32(buf, name.len() as u32);
    buf.extend_from_slice(name.as_bytes());
    for d in shape {
        put_u64(buf, d as u64);
    }
    for v in values {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

/// Serializes a model to bytes.
pub fn to_bytes(model: &M2ANet) -> Result<Vec<u8>> {
    let config = serde_json::to_vec(&model.config)?;
    let mut buf = Vec::with_capacity(model.num_params() * 8 + config.len() + 64);
    buf.extend_from_slice(MAGIC);
    put_u32(&mut buf, VERSION);
    put_u64(&mut buf, config.len() as u64);
    buf.extend_from_slice(&config);
    let count = model.store.len() + model.store.stats_iter().count();
    put_u32(&mut buf, count as u32);
    for (name, t) in model.store.iter() {
        put_entry(
            &mut buf,
            KIND_PARAM,
            name,
            t.shape(),
            t.data().iter().copied(),
        );
    }
    for (name, s) in model.store.stats_iter() {
        let values = s.mean.iter().chain(&s.var).copied();
        put_entry(&mut buf, KIND_STATS, name, [2, s.mean.len(), 1, 1], values);
    }
    Ok(buf)
}

pub fn save(model: &M2ANet, path: &Path) -> Result<u64> {
    let bytes = to_bytes(model)?;
    let mut f = fs::File::create(path)?;
    f.write_all(&bytes)?;
    f.sync_all()?;
    Ok(bytes.len() as u64)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| {
                Error::Format(format!(
                    "truncated while reading {what} at byte {}",
                    self.pos
                ))
            })?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4, what)?.try_into().expect("4 bytes"),
        ))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8, what)?.try_into().expect("8 bytes"),
        ))
    }

    fn len(&mut self, what: &str) -> Result<usize> {
        usize::try_from(self.u64(what)?)
            .map_err(|_| Error::Format(format!("{what} overflows usize")))
    }
}

/// Rebuilds a model from bytes, checking that every stored tensor matches
/// the architecture described by the embedded config and that none is missing.
pub fn from_bytes(bytes: &[u8]) -> Result<M2ANet> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8, "magic")? != MAGIC {
        return Err(Error::Format("not a model checkpoint (bad magic)".into()));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::Format(format!(
            "unsupported version {version} (expected {VERSION})"
        )));
    }
    let config_len = r.len("config length")?;
    let config: ModelConfig = serde_json::from_slice(r.take(config_len, "config")?)?;
    let mut model = M2ANet::build(config, 0)?;
    let count = r.u32("entry count")? as usize;
    let mut seen = HashSet::new();
    for _ in 0..count {
        let kind = r.u8("entry kind")?;
        let name_len = r.u32("name length")? as usize;
        let name = std::str::from_utf8(r.take(name_len, "name")?)
            .map_err(|_| Error::Format("entry name is not UTF-8".into()))?
            .to_string();
        let mut shape = [0usize; 4];
        for d in &mut shape {
            *d = r.len("dims")?;
        }
        let n = numel(shape);
        let raw = r.take(
            n.checked_mul(8)
                .ok_or_else(|| Error::Format("entry too large".into()))?,
            &name,
        )?;
        let values: Vec<f64> = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        match kind {
            KIND_PARAM => {
                let t = model
                    .store
                    .get_mut(&name)
                    .map_err(|_| Error::Format(format!("unexpected parameter `{name}`")))?;
                if t.shape() != shape {
                    return Err(Error::Format(format!(
                        "parameter `{name}` has shape {shape:?}, model expects {:?}",
                        t.shape()
                    )));
                }
                t.data_mut().copy_from_slice(&values);
            }
            KIND_STATS => {
                let s = model
                    .store
                    .stats_mut(&name)
                    .map_err(|_| Error::Format(format!("unexpected norm layer `{name}`")))?;
                let c = s.mean.len();
                if shape != [2, c, 1, 1] {
                    return Err(Error::Format(format!(
                        "norm layer `{name}` has shape {shape:?}, expected [2, {c}, 1, 1]"
                    )));
                }
                s.mean.copy_from_slice(&values[..c]);
                s.var.copy_from_slice(&values[c..]);
            }
            other => return Err(Error::Format(format!("unknown entry kind {other}"))),
        }
        if !seen.insert((kind, name.clone())) {
            return Err(Error::Format(format!("duplicate entry `{name}`")));
        }
    }
    let expected = model.store.len() + model.store.stats_iter().count();
    if seen.len() != expected {
        let missing: Vec<&str> = model
            .store
            .iter()
            .map(|(n, _)| (KIND_PARAM, n))
            .chain(model.store.stats_iter().map(|(n, _)| (KIND_STATS, n)))
            .filter(|(k, n)| !seen.contains(&(*k, n.to_string())))
            .map(|(_, n)| n)
            .collect();
        return Err(Error::Format(format!(
            "missing entries: {}",
            missing.join(", ")
        )));
    }
    if r.pos != bytes.len() {
        return Err(Error::Format(format!(
            "{} trailing bytes",
            bytes.len() - r.pos
        )));
    }
    Ok(model)
}

pub fn load(path: &Path) -> Result<M2ANet> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    from_bytes(&bytes)
}
