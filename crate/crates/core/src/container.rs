//! Binary tensor container shared by checkpoints (`HMSB`) and embedding
//! files (`HMSE`).
//!
//! ```text
//! magic [4] | version u32 | section count u32 | section*
//! section = name_len u32 | name (UTF-8) | dtype u8 | ndim u32 | dims u32×ndim
//!           | payload | crc32 u32
//! ```
//!
//! All integers and payloads are little-endian. The CRC32 covers the section
//! from `name_len` through the end of the payload.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub const VERSION: u32 = 1;
pub const CHECKPOINT_MAGIC: [u8; 4] = *b"HMSB";
pub const EMBEDDINGS_MAGIC: [u8; 4] = *b"HMSE";

#[derive(Debug, thiserror::Error)]
pub enum ContainerError {
    #[error("bad magic at offset 0: expected {expected:?}, found {found:?}")]
    BadMagic { expected: String, found: String },
    #[error("unsupported version {found} at offset 4 (expected {VERSION})")]
    Version { found: u32 },
    #[error("truncated {what} at offset {offset}: need {needed} bytes, {available} available")]
    Truncated {
        what: &'static str,
        offset: usize,
        needed: usize,
        available: usize,
    },
    #[error(
        "checksum mismatch in section `{section}` at offset {offset}: stored {stored:#010x}, computed {computed:#010x}"
    )]
    Checksum {
        section: String,
        offset: usize,
        stored: u32,
        computed: u32,
    },
    #[error("unknown dtype code {code} at offset {offset}")]
    Dtype { code: u8, offset: usize },
    #[error("section name at offset {offset} is not UTF-8")]
    Name { offset: usize },
    #[error("{count} trailing bytes at offset {offset}")]
    Trailing { offset: usize, count: usize },
    #[error("duplicate section `{0}`")]
    Duplicate(String),
    #[error("missing section `{0}`")]
    Missing(String),
    #[error("section `{name}`: {msg}")]
    Layout { name: String, msg: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    F32 = 0,
    F64 = 1,
    U32 = 2,
}

impl Dtype {
    fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(Dtype::F32),
            1 => Some(Dtype::F64),
            2 => Some(Dtype::U32),
            _ => None,
        }
    }

    fn width(self) -> usize {
        match self {
            Dtype::F64 => 8,
            Dtype::F32 | Dtype::U32 => 4,
        }
    }
}

#[derive(Debug, Clone)]
pub enum SectionData {
    F32(Vec<f32>),
    F64(Vec<f64>),
    U32(Vec<u32>),
}

impl SectionData {
    pub fn dtype(&self) -> Dtype {
        match self {
            SectionData::F32(_) => Dtype::F32,
            SectionData::F64(_) => Dtype::F64,
            SectionData::U32(_) => Dtype::U32,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            SectionData::F32(v) => v.len(),
            SectionData::F64(v) => v.len(),
            SectionData::U32(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn write_le(&self, out: &mut Vec<u8>) {
        match self {
            SectionData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            SectionData::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            SectionData::U32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        }
    }

    fn read_le(dtype: Dtype, bytes: &[u8]) -> Self {
        match dtype {
            Dtype::F32 => SectionData::F32(
                bytes
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            ),
            Dtype::F64 => SectionData::F64(
                bytes
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            ),
            Dtype::U32 => SectionData::U32(
                bytes
                    .chunks_exact(4)
                    .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            ),
        }
    }

    /// Bitwise equality, so NaN payloads compare equal to themselves.
    fn bits_eq(&self, other: &Self) -> bool {
        match (self, other) {
            (SectionData::F32(a), SectionData::F32(b)) => {
                a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
            }
            (SectionData::F64(a), SectionData::F64(b)) => {
                a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
            }
            (SectionData::U32(a), SectionData::U32(b)) => a == b,
            _ => false,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Section {
    pub name: String,
    pub dims: Vec<u32>,
    pub data: SectionData,
}

impl PartialEq for Section {
    fn eq(&self, other: &Self) -> bool {
        self.name == other.name && self.dims == other.dims && self.data.bits_eq(&other.data)
    }
}

impl Section {
    pub fn new(name: impl Into<String>, dims: Vec<u32>, data: SectionData) -> Result<Self> {
        let name = name.into();
        let n: usize = dims.iter().map(|d| *d as usize).product();
        if n != data.len() {
            return Err(ContainerError::Layout {
                name,
                msg: format!("dims {dims:?} hold {n} elements, payload has {}", data.len()),
            }
            .into());
        }
        Ok(Self { name, dims, data })
    }

    pub fn f64(name: impl Into<String>, dims: Vec<u32>, data: Vec<f64>) -> Result<Self> {
        Self::new(name, dims, SectionData::F64(data))
    }

    pub fn f32(name: impl Into<String>, dims: Vec<u32>, data: Vec<f32>) -> Result<Self> {
        Self::new(name, dims, SectionData::F32(data))
    }

    pub fn u32(name: impl Into<String>, dims: Vec<u32>, data: Vec<u32>) -> Result<Self> {
        Self::new(name, dims, SectionData::U32(data))
    }

    fn encode(&self, out: &mut Vec<u8>) {
        let start = out.len();
        out.extend_from_slice(&(self.name.len() as u32).to_le_bytes());
        out.extend_from_slice(self.name.as_bytes());
        out.push(self.data.dtype() as u8);
        out.extend_from_slice(&(self.dims.len() as u32).to_le_bytes());
        for d in &self.dims {
            out.extend_from_slice(&d.to_le_bytes());
        }
        self.data.write_le(out);
        let crc = crc32fast::hash(&out[start..]);
        out.extend_from_slice(&crc.to_le_bytes());
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Container {
    pub magic: [u8; 4],
    sections: Vec<Section>,
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> std::result::Result<&'a [u8], ContainerError> {
        let available = self.bytes.len() - self.pos;
        if n > available {
            return Err(ContainerError::Truncated {
                what,
                offset: self.pos,
                needed: n,
                available,
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &'static str) -> std::result::Result<u32, ContainerError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}

impl Container {
    pub fn new(magic: [u8; 4]) -> Self {
        Self {
            magic,
            sections: Vec::new(),
        }
    }

    pub fn push(&mut self, section: Section) -> Result<()> {
        if self.get(&section.name).is_some() {
            return Err(ContainerError::Duplicate(section.name).into());
        }
        self.sections.push(section);
        Ok(())
    }

    pub fn sections(&self) -> &[Section] {
        &self.sections
    }

    pub fn get(&self, name: &str) -> Option<&Section> {
        self.sections.iter().find(|s| s.name == name)
    }

    pub fn require(&self, name: &str) -> Result<&Section> {
        self.get(name)
            .ok_or_else(|| ContainerError::Missing(name.to_string()).into())
    }

    fn layout(name: &str, msg: impl Into<String>) -> Error {
        ContainerError::Layout {
            name: name.to_string(),
            msg: msg.into(),
        }
        .into()
    }

    pub fn f64s(&self, name: &str) -> Result<(&[u32], &[f64])> {
        let s = self.require(name)?;
        match &s.data {
            SectionData::F64(v) => Ok((&s.dims, v)),
            _ => Err(Self::layout(name, "expected f64 payload")),
        }
    }

    pub fn f32s(&self, name: &str) -> Result<(&[u32], &[f32])> {
        let s = self.require(name)?;
        match &s.data {
            SectionData::F32(v) => Ok((&s.dims, v)),
            _ => Err(Self::layout(name, "expected f32 payload")),
        }
    }

    pub fn u32s(&self, name: &str) -> Result<(&[u32], &[u32])> {
        let s = self.require(name)?;
        match &s.data {
            SectionData::U32(v) => Ok((&s.dims, v)),
            _ => Err(Self::layout(name, "expected u32 payload")),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&self.magic);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.sections.len() as u32).to_le_bytes());
        for s in &self.sections {
            s.encode(&mut out);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], magic: [u8; 4]) -> std::result::Result<Self, ContainerError> {
        let mut r = Reader { bytes, pos: 0 };
        let found = r.take(4, "magic")?;
        if found != magic {
            return Err(ContainerError::BadMagic {
                expected: String::from_utf8_lossy(&magic).into_owned(),
                found: String::from_utf8_lossy(found).into_owned(),
            });
        }
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(ContainerError::Version { found: version });
        }
        let count = r.u32("section count")?;
        let mut sections: Vec<Section> = Vec::new();
        for _ in 0..count {
            let start = r.pos;
            let name_len = r.u32("section name length")? as usize;
            let name_off = r.pos;
            let name = std::str::from_utf8(r.take(name_len, "section name")?)
                .map_err(|_| ContainerError::Name { offset: name_off })?
                .to_string();
            let dtype_off = r.pos;
            let code = r.take(1, "dtype")?[0];
            let dtype = Dtype::from_code(code).ok_or(ContainerError::Dtype {
                code,
                offset: dtype_off,
            })?;
            let ndim = r.u32("ndim")? as usize;
            // four bytes per dim; checked before allocating
            let dim_bytes = r.take(ndim.saturating_mul(4), "dims")?;
            let dims: Vec<u32> = dim_bytes
                .chunks_exact(4)
                .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            let n = dims
                .iter()
                .try_fold(1usize, |acc, d| acc.checked_mul(*d as usize))
                .and_then(|n| n.checked_mul(dtype.width()))
                .unwrap_or(usize::MAX);
            let payload = r.take(n, "payload")?;
            let computed = crc32fast::hash(&bytes[start..r.pos]);
            let crc_off = r.pos;
            let stored = r.u32("checksum")?;
            if stored != computed {
                return Err(ContainerError::Checksum {
                    section: name,
                    offset: crc_off,
                    stored,
                    computed,
                });
            }
            if sections.iter().any(|s| s.name == name) {
                return Err(ContainerError::Duplicate(name));
            }
            sections.push(Section {
                name,
                dims,
                data: SectionData::read_le(dtype, payload),
            });
        }
        if r.pos != bytes.len() {
            return Err(ContainerError::Trailing {
                offset: r.pos,
                count: bytes.len() - r.pos,
            });
        }
        Ok(Self { magic, sections })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path, magic: [u8; 4]) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Ok(Self::from_bytes(&bytes, magic)?)
    }
}
