//! A small binary container for named `f64` tensors plus a text metadata
//! block, used for both model checkpoints and toy-scene ground-truth
//! archives.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic "UWNC" | version u32 | meta_len u64 | meta (UTF-8)
//! entry_count u64
//! per entry: name_len u64 | name | ndim u64 | dims u64... | values f64...
//! sha256 of all preceding bytes (32 bytes)
//! ```
//!
//! Entries are stored in sorted name order (the map is a `BTreeMap`), so
//! writing the same logical content always produces identical bytes — the
//! checkpoint round-trip guarantees build on that.

use std::collections::BTreeMap;
use std::io::Read;
use std::path::Path;

use ndarray::{ArrayD, IxDyn};
use sha2::{Digest, Sha256};

use crate::{Result, UwError};

const MAGIC: &[u8; 4] = b"UWNC";
const VERSION: u32 = 1;

/// Named `f64` tensors with a free-form metadata string.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Container {
    pub meta: String,
    pub entries: BTreeMap<String, ArrayD<f64>>,
}

impl Container {
    pub fn new(meta: impl Into<String>) -> Self {
        Container {
            meta: meta.into(),
            entries: BTreeMap::new(),
        }
    }

    /// Serializes to bytes (deterministic for identical content).
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&VERSION.to_le_bytes());
        let meta = self.meta.as_bytes();
        buf.extend_from_slice(&(meta.len() as u64).to_le_bytes());
        buf.extend_from_slice(meta);
        buf.extend_from_slice(&(self.entries.len() as u64).to_le_bytes());
        for (name, arr) in &self.entries {
            let nb = name.as_bytes();
            buf.extend_from_slice(&(nb.len() as u64).to_le_bytes());
            buf.extend_from_slice(nb);
            buf.extend_from_slice(&(arr.ndim() as u64).to_le_bytes());
            for &d in arr.shape() {
                buf.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in arr.iter() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        let digest = Sha256::digest(&buf);
        buf.extend_from_slice(&digest);
        buf
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())
            .map_err(|e| UwError::io(path.display().to_string(), e))
    }

    /// Parses bytes, verifying magic, version and checksum.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |msg: &str| UwError::InvalidCheckpoint(msg.to_owned());
        if bytes.len() < MAGIC.len() + 4 + 8 + 32 {
            return Err(bad("truncated container"));
        }
        let (body, checksum) = bytes.split_at(bytes.len() - 32);
        let digest = Sha256::digest(body);
        if digest.as_slice() != checksum {
            return Err(bad("checksum mismatch (corrupted file)"));
        }
        struct Cursor<'a> {
            rest: &'a [u8],
        }
        impl<'a> Cursor<'a> {
            fn take(&mut self, n: usize) -> Result<&'a [u8]> {
                if self.rest.len() < n {
                    return Err(UwError::InvalidCheckpoint("unexpected end of data".into()));
                }
                let (head, tail) = self.rest.split_at(n);
                self.rest = tail;
                Ok(head)
            }
        }
        let mut r = Cursor { rest: body };
        let magic = r.take(4)?;
        if magic != MAGIC {
            return Err(bad("not a container file (bad magic)"));
        }
        let version = u32::from_le_bytes(r.take(4)?.try_into().unwrap());
        if version != VERSION {
            return Err(UwError::InvalidCheckpoint(format!(
                "unsupported container version {version}"
            )));
        }
        let meta_len = u64::from_le_bytes(r.take(8)?.try_into().unwrap()) as usize;
        let meta = String::from_utf8(r.take(meta_len)?.to_vec())
            .map_err(|_| bad("metadata is not UTF-8"))?;
        let count = u64::from_le_bytes(r.take(8)?.try_into().unwrap()) as usize;
        let mut entries = BTreeMap::new();
        for _ in 0..count {
            let name_len = u64::from_le_bytes(r.take(8)?.try_into().unwrap()) as usize;
            if name_len > 4096 {
                return Err(bad("entry name too long"));
            }
            let name = String::from_utf8(r.take(name_len)?.to_vec())
                .map_err(|_| bad("entry name is not UTF-8"))?;
            let ndim = u64::from_le_bytes(r.take(8)?.try_into().unwrap()) as usize;
            if ndim > 8 {
                return Err(bad("entry rank too large"));
            }
            let mut dims = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                dims.push(u64::from_le_bytes(r.take(8)?.try_into().unwrap()) as usize);
            }
            let len: usize = dims.iter().product();
            if len > r.rest.len() / 8 {
                return Err(bad("entry data exceeds file size"));
            }
            let raw = r.take(len * 8)?;
            let mut vals = Vec::with_capacity(len);
            for chunk in raw.chunks_exact(8) {
                vals.push(f64::from_le_bytes(chunk.try_into().unwrap()));
            }
            let arr = ArrayD::from_shape_vec(IxDyn(&dims), vals)
                .map_err(|_| bad("inconsistent entry shape"))?;
            if entries.insert(name.clone(), arr).is_some() {
                return Err(UwError::InvalidCheckpoint(format!(
                    "duplicate entry '{name}'"
                )));
            }
        }
        if !r.rest.is_empty() {
            return Err(bad("trailing bytes after last entry"));
        }
        Ok(Container { meta, entries })
    }

    pub fn read(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| UwError::io(path.display().to_string(), e))?;
        Self::from_bytes(&bytes)
    }

    /// Fetches a required entry by name.
    pub fn require(&self, name: &str) -> Result<&ArrayD<f64>> {
        self.entries.get(name).ok_or_else(|| {
            UwError::InvalidCheckpoint(format!("missing required entry '{name}'"))
        })
    }
}
