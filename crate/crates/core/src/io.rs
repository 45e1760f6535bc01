//! `.psta` tensor archives.
//!
//! Little-endian throughout:
//!
//! ```text
//! magic      4 bytes  "PSTA"
//! version    u32      1
//! count      u32      number of tensors
//! per tensor:
//!   name_len u16
//!   name     name_len bytes, UTF-8
//!   dtype    u8       0 = f32, 1 = f64
//!   ndim     u8
//!   dims     ndim × u32
//!   data     product(dims) × (4 | 8) bytes
//! ```
//!
//! Nothing may follow the last tensor. `docs/format.md` has the long form.

use std::collections::HashSet;
use std::io::{Cursor, Read};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use thiserror::Error;

use crate::tensor::Tensor4;

pub const MAGIC: [u8; 4] = *b"PSTA";
pub const VERSION: u32 = 1;
pub const HEADER_LEN: usize = 12;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ArchiveError {
    #[error("bad magic {:?}, expected \"PSTA\"", String::from_utf8_lossy(.0))]
    BadMagic([u8; 4]),
    #[error("unsupported archive version {0}")]
    UnsupportedVersion(u32),
    #[error("archive truncated: needed {needed} more bytes at offset {offset}")]
    Truncated { offset: usize, needed: usize },
    #[error("duplicate tensor name `{0}`")]
    DuplicateName(String),
    #[error("dtype byte {0} out of range (0 = f32, 1 = f64)")]
    BadDtype(u8),
    #[error("tensor name is not valid UTF-8")]
    BadName,
    #[error("{0} trailing bytes after the last tensor")]
    TrailingBytes(usize),
    #[error("tensor `{0}` is too large for the format")]
    TooLarge(String),
}

impl ArchiveError {
    /// Stable numeric code per error kind.
    pub fn code(&self) -> u8 {
        match self {
            ArchiveError::BadMagic(_) => 1,
            ArchiveError::UnsupportedVersion(_) => 2,
            ArchiveError::Truncated { .. } => 3,
            ArchiveError::DuplicateName(_) => 4,
            ArchiveError::BadDtype(_) => 5,
            ArchiveError::BadName => 6,
            ArchiveError::TrailingBytes(_) => 7,
            ArchiveError::TooLarge(_) => 8,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DType {
    F32,
    F64,
}

impl DType {
    fn byte(self) -> u8 {
        match self {
            DType::F32 => 0,
            DType::F64 => 1,
        }
    }

    fn size(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }
}

/// One named tensor of any rank. Values are held as f64; `dtype` is the
/// on-disk encoding.
#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub dtype: DType,
    pub dims: Vec<usize>,
    pub data: Vec<f64>,
}

impl NamedTensor {
    pub fn f64(name: impl Into<String>, dims: Vec<usize>, data: Vec<f64>) -> Self {
        NamedTensor {
            name: name.into(),
            dtype: DType::F64,
            dims,
            data,
        }
    }

    pub fn from_tensor4(name: impl Into<String>, t: &Tensor4) -> Self {
        Self::f64(name, t.dims().to_vec(), t.data().to_vec())
    }

    /// Rank-4 view; `None` for other ranks.
    pub fn to_tensor4(&self) -> Option<Tensor4> {
        let dims: [usize; 4] = self.dims.as_slice().try_into().ok()?;
        Tensor4::from_vec(dims, self.data.clone()).ok()
    }
}

/// Ordered collection of uniquely named tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TensorArchive {
    tensors: Vec<NamedTensor>,
}

impl TensorArchive {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, tensor: NamedTensor) -> Result<(), ArchiveError> {
        if self.get(&tensor.name).is_some() {
            return Err(ArchiveError::DuplicateName(tensor.name));
        }
        self.tensors.push(tensor);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&NamedTensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn tensors(&self) -> &[NamedTensor] {
        &self.tensors
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>, ArchiveError> {
        write_archive(&self.tensors)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, ArchiveError> {
        Ok(TensorArchive {
            tensors: read_archive(bytes)?,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> crate::Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> crate::Result<Self> {
        let bytes = std::fs::read(path)?;
        Ok(Self::from_bytes(&bytes)?)
    }
}

pub fn write_archive(tensors: &[NamedTensor]) -> Result<Vec<u8>, ArchiveError> {
    let mut seen = HashSet::new();
    let mut out = Vec::with_capacity(HEADER_LEN);
    out.extend_from_slice(&MAGIC);
    out.write_u32::<LittleEndian>(VERSION).unwrap();
    let count = u32::try_from(tensors.len()).map_err(|_| ArchiveError::TooLarge("<archive>".into()))?;
    out.write_u32::<LittleEndian>(count).unwrap();

    for t in tensors {
        if !seen.insert(t.name.as_str()) {
            return Err(ArchiveError::DuplicateName(t.name.clone()));
        }
        let too_large = || ArchiveError::TooLarge(t.name.clone());
        let name_len = u16::try_from(t.name.len()).map_err(|_| too_large())?;
        let ndim = u8::try_from(t.dims.len()).map_err(|_| too_large())?;
        let count: usize = t.dims.iter().product();
        if count != t.data.len() {
            return Err(too_large());
        }
        out.write_u16::<LittleEndian>(name_len).unwrap();
        out.extend_from_slice(t.name.as_bytes());
        out.push(t.dtype.byte());
        out.push(ndim);
        for &d in &t.dims {
            out.write_u32::<LittleEndian>(u32::try_from(d).map_err(|_| too_large())?)
                .unwrap();
        }
        match t.dtype {
            DType::F64 => t
                .data
                .iter()
                .for_each(|&v| out.write_f64::<LittleEndian>(v).unwrap()),
            DType::F32 => t
                .data
                .iter()
                .for_each(|&v| out.write_f32::<LittleEndian>(v as f32).unwrap()),
        }
    }
    Ok(out)
}

struct Reader<'a> {
    cur: Cursor<&'a [u8]>,
}

impl<'a> Reader<'a> {
    fn offset(&self) -> usize {
        self.cur.position() as usize
    }

    fn remaining(&self) -> usize {
        self.cur.get_ref().len() - self.offset()
    }

    fn need(&self, n: usize) -> Result<(), ArchiveError> {
        if self.remaining() < n {
            return Err(ArchiveError::Truncated {
                offset: self.offset(),
                needed: n - self.remaining(),
            });
        }
        Ok(())
    }

    fn u8(&mut self) -> Result<u8, ArchiveError> {
        self.need(1)?;
        Ok(self.cur.read_u8().unwrap())
    }

    fn u16(&mut self) -> Result<u16, ArchiveError> {
        self.need(2)?;
        Ok(self.cur.read_u16::<LittleEndian>().unwrap())
    }

    fn u32(&mut self) -> Result<u32, ArchiveError> {
        self.need(4)?;
        Ok(self.cur.read_u32::<LittleEndian>().unwrap())
    }

    fn bytes(&mut self, n: usize) -> Result<Vec<u8>, ArchiveError> {
        self.need(n)?;
        let mut buf = vec![0; n];
        self.cur.read_exact(&mut buf).unwrap();
        Ok(buf)
    }
}

pub fn read_archive(bytes: &[u8]) -> Result<Vec<NamedTensor>, ArchiveError> {
    let mut r = Reader {
        cur: Cursor::new(bytes),
    };
    let magic: [u8; 4] = match r.bytes(4) {
        Ok(m) => m.try_into().unwrap(),
        Err(e) => {
            // A short file that does not even start like an archive is a
            // magic error, not a truncation.
            if !MAGIC.starts_with(bytes) {
                let mut m = [0u8; 4];
                m[..bytes.len()].copy_from_slice(bytes);
                return Err(ArchiveError::BadMagic(m));
            }
            return Err(e);
        }
    };
    if magic != MAGIC {
        return Err(ArchiveError::BadMagic(magic));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(ArchiveError::UnsupportedVersion(version));
    }
    let count = r.u32()? as usize;

    let mut seen = HashSet::new();
    let mut tensors = Vec::with_capacity(count.min(1024));
    for _ in 0..count {
        let name_len = r.u16()? as usize;
        let name = String::from_utf8(r.bytes(name_len)?).map_err(|_| ArchiveError::BadName)?;
        let dtype = match r.u8()? {
            0 => DType::F32,
            1 => DType::F64,
            b => return Err(ArchiveError::BadDtype(b)),
        };
        let ndim = r.u8()? as usize;
        let mut dims = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            dims.push(r.u32()? as usize);
        }
        let payload = dims
            .iter()
            .try_fold(dtype.size(), |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| ArchiveError::TooLarge(name.clone()))?;
        r.need(payload)?;
        let elems = payload / dtype.size();
        let mut data = Vec::with_capacity(elems);
        match dtype {
            DType::F64 => {
                for _ in 0..elems {
                    data.push(r.cur.read_f64::<LittleEndian>().unwrap());
                }
            }
            DType::F32 => {
                for _ in 0..elems {
                    data.push(f64::from(r.cur.read_f32::<LittleEndian>().unwrap()));
                }
            }
        }
        if !seen.insert(name.clone()) {
            return Err(ArchiveError::DuplicateName(name));
        }
        tensors.push(NamedTensor {
            name,
            dtype,
            dims,
            data,
        });
    }
    if r.remaining() != 0 {
        return Err(ArchiveError::TrailingBytes(r.remaining()));
    }
    Ok(tensors)
}
