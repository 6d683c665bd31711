//! Versioned binary parameter container.
//!
//! ```text
//! "PDSC" | u32 version | u32 meta_len | meta (UTF-8 JSON) | u32 entry_count
//! entry: u32 name_len | name | u32 ndim | u64 * ndim shape | f64 * prod(shape)
//! ```
//! All integers and floats little-endian.

use std::io::{Cursor, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use super::Network;
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"PDSC";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Checkpoint {
    pub meta: serde_json::Value,
    entries: Vec<CheckpointEntry>,
}

fn corrupt(what: impl std::fmt::Display) -> Error {
    Error::Checkpoint(what.to_string())
}

impl Checkpoint {
    pub fn new(meta: serde_json::Value) -> Self {
        Self {
            meta,
            entries: Vec::new(),
        }
    }

    pub fn entries(&self) -> &[CheckpointEntry] {
        &self.entries
    }

    pub fn push(&mut self, name: impl Into<String>, shape: Vec<usize>, data: Vec<f64>) -> Result<()> {
        let name = name.into();
        if shape.iter().product::<usize>() != data.len() {
            return Err(Error::InvalidArgument(format!(
                "entry `{name}`: shape {shape:?} does not match {} values",
                data.len()
            )));
        }
        if self.get(&name).is_some() {
            return Err(Error::InvalidArgument(format!("duplicate checkpoint entry `{name}`")));
        }
        self.entries.push(CheckpointEntry { name, shape, data });
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&CheckpointEntry> {
        self.entries.iter().find(|e| e.name == name)
    }

    pub fn require(&self, name: &str) -> Result<&CheckpointEntry> {
        self.get(name)
            .ok_or_else(|| corrupt(format!("missing entry `{name}`")))
    }

    /// Stores every named parameter slice of `net` under `prefix.`.
    pub fn add_network<N: Network>(&mut self, prefix: &str, net: &N) -> Result<()> {
        let p = net.params();
        for s in net.layout().slices() {
            self.push(format!("{prefix}.{}", s.name), s.shape.clone(), p[s.range()].to_vec())?;
        }
        Ok(())
    }

    /// Restores parameters written by [`Checkpoint::add_network`], checking shapes.
    pub fn load_network<N: Network>(&self, prefix: &str, net: &mut N) -> Result<()> {
        let slices = net.layout().slices().to_vec();
        let p = net.params_mut();
        for s in slices {
            let name = format!("{prefix}.{}", s.name);
            let e = self.require(&name)?;
            if e.shape != s.shape {
                return Err(corrupt(format!(
                    "entry `{name}` has shape {:?}, network expects {:?}",
                    e.shape, s.shape
                )));
            }
            p[s.range()].copy_from_slice(&e.data);
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        let meta = serde_json::to_vec(&self.meta).expect("JSON values always serialize");
        out.write_u32::<LittleEndian>(CHECKPOINT_VERSION).unwrap();
        out.write_u32::<LittleEndian>(meta.len() as u32).unwrap();
        out.extend_from_slice(&meta);
        out.write_u32::<LittleEndian>(self.entries.len() as u32).unwrap();
        for e in &self.entries {
            out.write_u32::<LittleEndian>(e.name.len() as u32).unwrap();
            out.extend_from_slice(e.name.as_bytes());
            out.write_u32::<LittleEndian>(e.shape.len() as u32).unwrap();
            for &d in &e.shape {
                out.write_u64::<LittleEndian>(d as u64).unwrap();
            }
            for &v in &e.data {
                out.write_f64::<LittleEndian>(v).unwrap();
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Cursor::new(bytes);
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(|_| corrupt("truncated magic"))?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(corrupt(format!("bad magic {magic:?}")));
        }
        let short = |_| corrupt("truncated data");
        let version = r.read_u32::<LittleEndian>().map_err(short)?;
        if version != CHECKPOINT_VERSION {
            return Err(corrupt(format!("unsupported version {version}")));
        }
        let meta_len = r.read_u32::<LittleEndian>().map_err(short)? as usize;
        let meta_bytes = take(&mut r, meta_len)?;
        let meta = serde_json::from_slice(&meta_bytes).map_err(|e| corrupt(format!("metadata: {e}")))?;
        let count = r.read_u32::<LittleEndian>().map_err(short)?;
        let mut ck = Checkpoint::new(meta);
        for _ in 0..count {
            let name_len = r.read_u32::<LittleEndian>().map_err(short)? as usize;
            let name = String::from_utf8(take(&mut r, name_len)?).map_err(|_| corrupt("entry name is not UTF-8"))?;
            let ndim = r.read_u32::<LittleEndian>().map_err(short)? as usize;
            if ndim > 8 {
                return Err(corrupt(format!("entry `{name}` has {ndim} dims")));
            }
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(r.read_u64::<LittleEndian>().map_err(short)? as usize);
            }
            let n = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .filter(|&n| n.saturating_mul(8) <= bytes.len())
                .ok_or_else(|| corrupt(format!("entry `{name}` shape {shape:?} exceeds file size")))?;
            let mut data = vec![0.0; n];
            r.read_f64_into::<LittleEndian>(&mut data).map_err(short)?;
            ck.push(name, shape, data).map_err(|e| corrupt(e.to_string()))?;
        }
        if (r.position() as usize) != bytes.len() {
            return Err(corrupt("trailing bytes after last entry"));
        }
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        let mut f = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(&self.to_bytes()).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

fn take(r: &mut Cursor<&[u8]>, n: usize) -> Result<Vec<u8>> {
    let mut buf = vec![0u8; n];
    r.read_exact(&mut buf).map_err(|_| corrupt("truncated data"))?;
    Ok(buf)
}
