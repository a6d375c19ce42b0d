//! `MKVQ` tensor container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic   b"MKVQ"
//! version u8 = 1
//! dtype   u8 = 0 (f32)
//! count   u32                 number of sections
//! per section:
//!   name_len u16, name (UTF-8)
//!   rank u8, dims u64 x rank
//!   payload f32 x product(dims), row-major
//! ```
//!
//! Attention tensors use the section names `{prefix}.q`, `{prefix}.k` and
//! `{prefix}.v`, e.g. `layer0.head3.k`.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::Array2;

use crate::attention::AttentionInstance;
use crate::error::{Error, Result};

pub const MAGIC: [u8; 4] = *b"MKVQ";
pub const VERSION: u8 = 1;
const DTYPE_F32: u8 = 0;

#[derive(Debug, Clone, PartialEq)]
pub struct Section {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: Vec<f32>,
}

/// Named f32 tensors, kept in insertion order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TensorDump {
    sections: Vec<Section>,
    index: BTreeMap<String, usize>,
}

impl TensorDump {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds or replaces a section. Fails if `data` does not match `dims`.
    pub fn insert(&mut self, name: impl Into<String>, dims: Vec<usize>, data: Vec<f32>) -> Result<()> {
        let name = name.into();
        if name.len() > u16::MAX as usize {
            return Err(Error::invalid("section name longer than 65535 bytes"));
        }
        if dims.len() > u8::MAX as usize {
            return Err(Error::invalid("section rank above 255"));
        }
        let expected = checked_product(&dims).ok_or_else(|| Error::invalid("section dims overflow"))?;
        if expected != data.len() {
            return Err(Error::invalid(format!(
                "section `{name}`: dims {dims:?} need {expected} values, got {}",
                data.len()
            )));
        }
        let section = Section { name: name.clone(), dims, data };
        match self.index.get(&name) {
            Some(&i) => self.sections[i] = section,
            None => {
                self.index.insert(name, self.sections.len());
                self.sections.push(section);
            }
        }
        Ok(())
    }

    /// Stores a 2-D array, narrowing to f32.
    pub fn insert_array(&mut self, name: impl Into<String>, array: &Array2<f64>) {
        let dims = vec![array.nrows(), array.ncols()];
        let data = array.iter().map(|&v| v as f32).collect();
        self.insert(name, dims, data).expect("array shape matches its data");
    }

    pub fn section(&self, name: &str) -> Option<&Section> {
        self.index.get(name).map(|&i| &self.sections[i])
    }

    pub fn sections(&self) -> &[Section] {
        &self.sections
    }

    /// Section `name` as an `f64` matrix. Rank-1 sections become one row.
    pub fn array2(&self, name: &str) -> Result<Array2<f64>> {
        let s = self.section(name).ok_or_else(|| Error::invalid(format!("no section named `{name}`")))?;
        let (rows, cols) = match s.dims[..] {
            [n] => (1, n),
            [r, c] => (r, c),
            _ => return Err(Error::invalid(format!("section `{name}` has rank {}, expected 2", s.dims.len()))),
        };
        let data = s.data.iter().map(|&v| v as f64).collect();
        Ok(Array2::from_shape_vec((rows, cols), data).expect("validated on insert"))
    }

    /// Prefixes `p` for which `p.q`, `p.k` and `p.v` all exist, sorted.
    pub fn prefixes(&self) -> Vec<String> {
        self.index
            .keys()
            .filter_map(|n| n.strip_suffix(".k"))
            .filter(|p| self.index.contains_key(&format!("{p}.q")) && self.index.contains_key(&format!("{p}.v")))
            .map(str::to_owned)
            .collect()
    }

    /// Builds an instance from `{prefix}.q/.k/.v`. With `None`, the dump
    /// must hold exactly one such triple.
    pub fn attention_instance(&self, prefix: Option<&str>) -> Result<AttentionInstance> {
        let prefix = match prefix {
            Some(p) => p.to_owned(),
            None => {
                let all = self.prefixes();
                match all.as_slice() {
                    [one] => one.clone(),
                    [] => return Err(Error::invalid("dump has no q/k/v section triple")),
                    _ => return Err(Error::invalid(format!("dump has several q/k/v triples {all:?}; pick one"))),
                }
            }
        };
        AttentionInstance::new(
            self.array2(&format!("{prefix}.q"))?,
            self.array2(&format!("{prefix}.k"))?,
            self.array2(&format!("{prefix}.v"))?,
        )
    }

    pub fn insert_instance(&mut self, prefix: &str, inst: &AttentionInstance) {
        self.insert_array(format!("{prefix}.q"), &inst.queries);
        self.insert_array(format!("{prefix}.k"), &inst.keys);
        self.insert_array(format!("{prefix}.v"), &inst.values);
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&MAGIC);
        out.push(VERSION);
        out.push(DTYPE_F32);
        out.extend_from_slice(&(self.sections.len() as u32).to_le_bytes());
        for s in &self.sections {
            out.extend_from_slice(&(s.name.len() as u16).to_le_bytes());
            out.extend_from_slice(s.name.as_bytes());
            out.push(s.dims.len() as u8);
            for &d in &s.dims {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in &s.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let magic = r.take(4).map_err(|_| Error::UnsupportedFormat("file shorter than the magic tag".into()))?;
        if magic != MAGIC {
            return Err(Error::UnsupportedFormat(format!("bad magic {magic:02x?}")));
        }
        let version = r.u8()?;
        if version != VERSION {
            return Err(Error::UnsupportedFormat(format!("version {version}, expected {VERSION}")));
        }
        let dtype = r.u8()?;
        if dtype != DTYPE_F32 {
            return Err(Error::UnsupportedFormat(format!("dtype tag {dtype}, only f32 (0) is supported")));
        }
        let count = u32::from_le_bytes(r.array()?);
        let mut dump = TensorDump::new();
        for _ in 0..count {
            let name_len = u16::from_le_bytes(r.array()?) as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| Error::CorruptFile("section name is not UTF-8".into()))?
                .to_owned();
            if dump.index.contains_key(&name) {
                return Err(Error::CorruptFile(format!("duplicate section `{name}`")));
            }
            let rank = r.u8()? as usize;
            let dims = (0..rank)
                .map(|_| {
                    let d = u64::from_le_bytes(r.array()?);
                    usize::try_from(d).map_err(|_| Error::CorruptFile(format!("dimension {d} too large")))
                })
                .collect::<Result<Vec<_>>>()?;
            let n = checked_product(&dims)
                .filter(|n| n.checked_mul(4).is_some())
                .ok_or_else(|| Error::CorruptFile(format!("section `{name}` dims {dims:?} overflow")))?;
            let payload = r.take(n * 4).map_err(|_| {
                Error::CorruptFile(format!("section `{name}` declares {dims:?} but its payload is truncated"))
            })?;
            let data = payload.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
            dump.insert(name, dims, data)?;
        }
        if r.pos != bytes.len() {
            return Err(Error::CorruptFile(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(dump)
    }
}

fn checked_product(dims: &[usize]) -> Option<usize> {
    dims.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::CorruptFile(format!("unexpected end of file at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().unwrap())
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
}

/// Reads a dump. A path that does not exist yields [`Error::MissingDump`].
pub fn read_dump(path: impl AsRef<Path>) -> Result<TensorDump> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingDump(path.display().to_string()),
        _ => Error::Io(e),
    })?;
    TensorDump::from_bytes(&bytes)
}

pub fn write_dump(dump: &TensorDump, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, dump.to_bytes())?;
    Ok(())
}
