//! `RCUT` binary tensor container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic        4 bytes  "RCUT"
//! version      u32      1
//! entry_count  u32
//! entries, each:
//!   name_len   u16
//!   name       name_len bytes, UTF-8
//!   dtype      u8       0 = f32
//!   ndim       u8
//!   dims       u32 x ndim
//!   payload    f32 x prod(dims), row-major
//! ```

use std::collections::HashSet;
use std::path::Path;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"RCUT";
pub const VERSION: u32 = 1;
pub const DTYPE_F32: u8 = 0;

/// One named tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorEntry {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: Vec<f32>,
}

impl TensorEntry {
    pub fn new(name: impl Into<String>, dims: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let name = name.into();
        let expected: usize = dims.iter().product();
        if expected != data.len() {
            return Err(Error::Shape(format!(
                "tensor '{name}' with dims {dims:?} needs {expected} values, got {}",
                data.len()
            )));
        }
        Ok(TensorEntry { name, dims, data })
    }
}

/// Ordered collection of uniquely named tensors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TensorFile {
    entries: Vec<TensorEntry>,
}

impl TensorFile {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_entries(entries: Vec<TensorEntry>) -> Result<Self> {
        let mut file = TensorFile::new();
        for e in entries {
            file.push(e)?;
        }
        Ok(file)
    }

    pub fn push(&mut self, entry: TensorEntry) -> Result<()> {
        if self.get(&entry.name).is_some() {
            return Err(Error::Domain(format!("duplicate tensor name '{}'", entry.name)));
        }
        self.entries.push(entry);
        Ok(())
    }

    pub fn insert(&mut self, name: &str, dims: Vec<usize>, data: Vec<f32>) -> Result<()> {
        self.push(TensorEntry::new(name, dims, data)?)
    }

    pub fn entries(&self) -> &[TensorEntry] {
        &self.entries
    }

    pub fn get(&self, name: &str) -> Option<&TensorEntry> {
        self.entries.iter().find(|e| e.name == name)
    }

    /// Looks up `name` and checks it has exactly `dims`.
    pub fn require(&self, name: &str, dims: &[usize]) -> Result<&TensorEntry> {
        let e = self
            .get(name)
            .ok_or_else(|| Error::format(None, format!("missing tensor '{name}'")))?;
        if e.dims != dims {
            return Err(Error::Shape(format!(
                "tensor '{name}' has dims {:?}, expected {dims:?}",
                e.dims
            )));
        }
        Ok(e)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut seen = HashSet::new();
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&u32_len(self.entries.len(), "entry count")?.to_le_bytes());
        for e in &self.entries {
            if !seen.insert(e.name.as_str()) {
                return Err(Error::Domain(format!("duplicate tensor name '{}'", e.name)));
            }
            let name = e.name.as_bytes();
            let name_len = u16::try_from(name.len())
                .map_err(|_| Error::Domain(format!("tensor name '{}' too long", e.name)))?;
            let ndim = u8::try_from(e.dims.len())
                .map_err(|_| Error::Domain(format!("tensor '{}' has too many dims", e.name)))?;
            out.extend_from_slice(&name_len.to_le_bytes());
            out.extend_from_slice(name);
            out.push(DTYPE_F32);
            out.push(ndim);
            for &d in &e.dims {
                out.extend_from_slice(&u32_len(d, "dimension")?.to_le_bytes());
            }
            for v in &e.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let magic = r.take(4, "magic")?;
        if magic != MAGIC {
            return Err(Error::format(Some(0), format!("bad magic {magic:?}, expected \"RCUT\"")));
        }
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(Error::format(
                Some(4),
                format!("unsupported version {version}, expected {VERSION}"),
            ));
        }
        let count = r.u32("entry count")? as usize;
        let mut file = TensorFile::new();
        for _ in 0..count {
            let name_len = r.u16("name length")? as usize;
            let name_at = r.pos as u64;
            let name = std::str::from_utf8(r.take(name_len, "name")?)
                .map_err(|_| Error::format(Some(name_at), "tensor name is not UTF-8"))?
                .to_string();
            let dtype_at = r.pos as u64;
            let dtype = r.u8("dtype")?;
            if dtype != DTYPE_F32 {
                return Err(Error::format(
                    Some(dtype_at),
                    format!("tensor '{name}' has unknown dtype {dtype}"),
                ));
            }
            let ndim = r.u8("ndim")? as usize;
            let mut dims = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                dims.push(r.u32("dimension")? as usize);
            }
            let numel = dims
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .and_then(|n| n.checked_mul(4))
                .ok_or_else(|| Error::format(Some(r.pos as u64), "tensor size overflows"))?;
            let payload_at = r.pos as u64;
            let available = bytes.len() - r.pos;
            if available < numel {
                return Err(Error::format(
                    Some(payload_at),
                    format!(
                        "tensor '{name}' payload truncated: expected {numel} bytes, found {available}"
                    ),
                ));
            }
            let data = r
                .take(numel, "payload")?
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect();
            if file.get(&name).is_some() {
                return Err(Error::format(Some(name_at), format!("duplicate tensor name '{name}'")));
            }
            file.entries.push(TensorEntry { name, dims, data });
        }
        if r.pos != bytes.len() {
            return Err(Error::format(
                Some(r.pos as u64),
                format!("{} trailing bytes after last entry", bytes.len() - r.pos),
            ));
        }
        Ok(file)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

fn u32_len(n: usize, what: &str) -> Result<u32> {
    u32::try_from(n).map_err(|_| Error::Domain(format!("{what} {n} does not fit in u32")))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::format(
                Some(self.pos as u64),
                format!(
                    "truncated {what}: expected {n} bytes, found {}",
                    self.bytes.len() - self.pos
                ),
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        let b = self.take(2, what)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}
