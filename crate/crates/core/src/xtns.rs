//! XTNS named-tensor container, shared by visual features and checkpoints.
//!
//! Layout (little-endian): magic `XTNS`, u32 version (1), u32 entry count,
//! then per entry: u16 name length, UTF-8 name, u8 dtype (0 = f32, 1 = i64),
//! u8 rank, u32 dims[rank], raw payload.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"XTNS";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub enum XtnsData {
    F32(Vec<f32>),
    I64(Vec<i64>),
}

impl XtnsData {
    fn len(&self) -> usize {
        match self {
            XtnsData::F32(v) => v.len(),
            XtnsData::I64(v) => v.len(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct XtnsEntry {
    pub name: String,
    pub dims: Vec<u32>,
    pub data: XtnsData,
}

impl XtnsEntry {
    pub fn f32(name: &str, dims: &[usize], data: Vec<f32>) -> Self {
        Self {
            name: name.to_string(),
            dims: dims.iter().map(|&d| d as u32).collect(),
            data: XtnsData::F32(data),
        }
    }

    pub fn i64(name: &str, dims: &[usize], data: Vec<i64>) -> Self {
        Self {
            name: name.to_string(),
            dims: dims.iter().map(|&d| d as u32).collect(),
            data: XtnsData::I64(data),
        }
    }

    pub fn shape(&self) -> Vec<usize> {
        self.dims.iter().map(|&d| d as usize).collect()
    }
}

/// Ordered list of entries; order is preserved through encode/decode.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Container {
    pub entries: Vec<XtnsEntry>,
}

impl Container {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, entry: XtnsEntry) {
        self.entries.push(entry);
    }

    pub fn get(&self, name: &str) -> Option<&XtnsEntry> {
        self.entries.iter().find(|e| e.name == name)
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for e in &self.entries {
            let numel: usize = e.dims.iter().map(|&d| d as usize).product();
            if numel != e.data.len() {
                return Err(Error::Format(format!(
                    "entry `{}` has dims {:?} but {} values",
                    e.name,
                    e.dims,
                    e.data.len()
                )));
            }
            let name = e.name.as_bytes();
            let name_len = u16::try_from(name.len())
                .map_err(|_| Error::Format(format!("entry name too long: {}", e.name)))?;
            let rank = u8::try_from(e.dims.len())
                .map_err(|_| Error::Format(format!("entry `{}` rank too large", e.name)))?;
            out.extend_from_slice(&name_len.to_le_bytes());
            out.extend_from_slice(name);
            out.push(match e.data {
                XtnsData::F32(_) => 0,
                XtnsData::I64(_) => 1,
            });
            out.push(rank);
            for d in &e.dims {
                out.extend_from_slice(&d.to_le_bytes());
            }
            match &e.data {
                XtnsData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
                XtnsData::I64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            }
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Format("missing XTNS magic".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported XTNS version {version}")));
        }
        let count = r.u32()?;
        let mut entries = Vec::new();
        for _ in 0..count {
            let name_len = r.u16()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| Error::Format("entry name is not UTF-8".into()))?
                .to_string();
            let dtype = r.u8()?;
            let rank = r.u8()? as usize;
            let dims = (0..rank).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
            let numel = dims
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d as usize))
                .ok_or_else(|| Error::Format(format!("entry `{name}` is too large")))?;
            let data = match dtype {
                0 => XtnsData::F32(
                    r.take(numel.checked_mul(4).ok_or_else(|| Error::Format("overflow".into()))?)?
                        .chunks_exact(4)
                        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                        .collect(),
                ),
                1 => XtnsData::I64(
                    r.take(numel.checked_mul(8).ok_or_else(|| Error::Format("overflow".into()))?)?
                        .chunks_exact(8)
                        .map(|c| i64::from_le_bytes(c.try_into().expect("8 bytes")))
                        .collect(),
                ),
                other => return Err(Error::Format(format!("entry `{name}` has unknown dtype {other}"))),
            };
            entries.push(XtnsEntry { name, dims, data });
        }
        if r.pos != bytes.len() {
            return Err(Error::Format(format!(
                "{} trailing bytes after last entry",
                bytes.len() - r.pos
            )));
        }
        Ok(Self { entries })
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.encode()?).map_err(|e| Error::io(path, e))
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Format(format!("truncated container at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}
