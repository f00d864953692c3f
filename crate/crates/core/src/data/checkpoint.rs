//! Checkpoint container: `"TMAE"`, `u32` version, a `key=value` config
//! record and a table of named `f32` tensors, all little-endian.
//!
//! ```text
//! magic[4] version:u32
//! record_len:u32 record[record_len]          (UTF-8 "key=value\n" lines)
//! count:u32
//! count × { name_len:u32 name rank:u32 extents:u32×rank values:f32×numel }
//! ```

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"TMAE";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f32>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub record: BTreeMap<String, String>,
    pub tensors: Vec<NamedTensor>,
}

impl Checkpoint {
    pub fn get(&self, name: &str) -> Option<&NamedTensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn record_value(&self, key: &str) -> Result<&str> {
        self.record
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| Error::Format(format!("checkpoint record lacks {key}")))
    }

    pub fn push(&mut self, name: impl Into<String>, shape: &[usize], values: Vec<f32>) {
        self.tensors.push(NamedTensor {
            name: name.into(),
            shape: shape.to_vec(),
            values,
        });
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let mut record = String::new();
        for (k, v) in &self.record {
            if k.contains(['=', '\n']) || v.contains('\n') {
                return Err(Error::Format(format!("record entry {k:?} cannot be encoded")));
            }
            record.push_str(&format!("{k}={v}\n"));
        }
        let len32 = |n: usize| -> Result<[u8; 4]> {
            u32::try_from(n)
                .map(u32::to_le_bytes)
                .map_err(|_| Error::Format(format!("length {n} exceeds u32")))
        };
        out.extend_from_slice(&len32(record.len())?);
        out.extend_from_slice(record.as_bytes());
        out.extend_from_slice(&len32(self.tensors.len())?);
        let mut seen = std::collections::HashSet::new();
        for t in &self.tensors {
            if !seen.insert(t.name.as_str()) {
                return Err(Error::Format(format!("tensor {} appears twice", t.name)));
            }
            if t.shape.iter().product::<usize>() != t.values.len() {
                return Err(Error::Format(format!("tensor {} has inconsistent shape", t.name)));
            }
            if let Some(i) = t.values.iter().position(|v| !v.is_finite()) {
                return Err(Error::Format(format!("tensor {} has a non-finite value at {i}", t.name)));
            }
            out.extend_from_slice(&len32(t.name.len())?);
            out.extend_from_slice(t.name.as_bytes());
            out.extend_from_slice(&len32(t.shape.len())?);
            for &e in &t.shape {
                out.extend_from_slice(&len32(e)?);
            }
            for v in &t.values {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Cursor { bytes, pos: 0 };
        if r.take(4, "magic")? != MAGIC {
            return Err(Error::Format("bad checkpoint magic".into()));
        }
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let len = r.u32("record length")? as usize;
        let text = std::str::from_utf8(r.take(len, "record")?)
            .map_err(|_| Error::Format("config record is not UTF-8".into()))?;
        let mut record = BTreeMap::new();
        for line in text.lines() {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Format(format!("malformed record line {line:?}")))?;
            record.insert(k.to_string(), v.to_string());
        }
        let count = r.u32("tensor count")? as usize;
        let mut tensors = Vec::with_capacity(count.min(4096));
        for i in 0..count {
            let what = format!("tensor {i}");
            let nlen = r.u32(&what)? as usize;
            let name = String::from_utf8(r.take(nlen, &what)?.to_vec())
                .map_err(|_| Error::Format(format!("{what}: name is not UTF-8")))?;
            let rank = r.u32(&name)? as usize;
            let shape = (0..rank).map(|_| Ok(r.u32(&name)? as usize)).collect::<Result<Vec<_>>>()?;
            let numel: usize = shape.iter().product();
            let raw = r.take(numel * 4, &name)?;
            let values = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            tensors.push(NamedTensor { name, shape, values });
        }
        if r.pos != bytes.len() {
            return Err(Error::Format(format!("{} trailing bytes after checkpoint", bytes.len() - r.pos)));
        }
        Ok(Checkpoint { record, tensors })
    }

    pub fn save(&self, mut sink: impl Write) -> Result<()> {
        sink.write_all(&self.to_bytes()?)
            .and_then(|_| sink.flush())
            .map_err(|e| Error::io("<checkpoint sink>", e))
    }

    pub fn load(mut source: impl Read) -> Result<Self> {
        let mut bytes = Vec::new();
        source
            .read_to_end(&mut bytes)
            .map_err(|e| Error::io("<checkpoint source>", e))?;
        Self::from_bytes(&bytes)
    }

    pub fn save_file(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load_file(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Format(format!("checkpoint truncated in {what}")))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}
