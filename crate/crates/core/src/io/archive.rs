//! Binary tensor archive.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic    "KTNZ"
//! version  u32
//! count    u32
//! count x {
//!     name_len u16, name (utf-8)
//!     dtype    u8   (1 = f32, 2 = f64)
//!     rank     u8
//!     dims     u64 x rank
//!     data     dtype x prod(dims)
//! }
//! crc32    u32 over every preceding byte
//! ```
//!
//! An archive with no tensors is therefore 16 bytes long.

use std::fs;
use std::io::Write;
use std::path::Path;

use thiserror::Error;

use crate::tensor::Matrix;

pub const MAGIC: [u8; 4] = *b"KTNZ";
pub const VERSION: u32 = 1;
const HEADER_LEN: usize = 12;
const CRC_LEN: usize = 4;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ArchiveError {
    #[error("bad magic bytes {0:?}")]
    BadMagic([u8; 4]),
    #[error("unsupported archive version {0}")]
    UnsupportedVersion(u32),
    #[error("archive truncated while reading {tensor}")]
    Truncated { tensor: String },
    #[error("checksum mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    CrcMismatch { stored: u32, computed: u32 },
    #[error("unknown dtype tag {tag} for {tensor}")]
    UnknownDtype { tensor: String, tag: u8 },
    #[error("tensor name is not valid utf-8")]
    BadName,
    #[error("duplicate tensor name {0}")]
    Duplicate(String),
    #[error("missing tensor {0}")]
    Missing(String),
    #[error("{tensor} has shape {got:?}, expected {expected:?}")]
    ShapeMismatch {
        tensor: String,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("tensor name longer than 65535 bytes")]
    NameTooLong,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DType {
    F32 = 1,
    F64 = 2,
}

impl DType {
    fn width(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }

    fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            1 => Some(DType::F32),
            2 => Some(DType::F64),
            _ => None,
        }
    }
}

/// A named n-dimensional array. Values are always held as f64 in memory;
/// the dtype only decides the on-disk width.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub dtype: DType,
    pub dims: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn from_matrix(name: impl Into<String>, m: &Matrix) -> Self {
        Tensor {
            name: name.into(),
            dtype: DType::F64,
            dims: vec![m.rows(), m.cols()],
            data: m.as_slice().to_vec(),
        }
    }

    pub fn vector(name: impl Into<String>, data: Vec<f64>) -> Self {
        Tensor {
            name: name.into(),
            dtype: DType::F64,
            dims: vec![data.len()],
            data,
        }
    }

    /// View a rank-2 tensor (or a rank-1 tensor as a single row) as a matrix.
    pub fn to_matrix(&self) -> crate::Result<Matrix> {
        let (r, c) = match self.dims.as_slice() {
            [n] => (1, *n),
            [r, c] => (*r, *c),
            _ => {
                return Err(ArchiveError::ShapeMismatch {
                    tensor: self.name.clone(),
                    expected: vec![0, 0],
                    got: self.dims.clone(),
                }
                .into())
            }
        };
        Matrix::new(r, c, self.data.clone()).map_err(|e| e.in_tensor(self.name.clone()))
    }
}

/// Ordered collection of tensors with unique names.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TensorArchive {
    tensors: Vec<Tensor>,
}

impl TensorArchive {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn push(&mut self, t: Tensor) -> Result<(), ArchiveError> {
        if self.get(&t.name).is_some() {
            return Err(ArchiveError::Duplicate(t.name));
        }
        if t.name.len() > u16::MAX as usize {
            return Err(ArchiveError::NameTooLong);
        }
        self.tensors.push(t);
        Ok(())
    }

    pub fn push_matrix(&mut self, name: impl Into<String>, m: &Matrix) -> Result<(), ArchiveError> {
        self.push(Tensor::from_matrix(name, m))
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor, ArchiveError> {
        self.get(name)
            .ok_or_else(|| ArchiveError::Missing(name.to_string()))
    }

    pub fn matrix(&self, name: &str) -> crate::Result<Matrix> {
        self.require(name)?.to_matrix()
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.iter().map(|t| t.name.as_str())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + CRC_LEN);
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for t in &self.tensors {
            out.extend_from_slice(&(t.name.len() as u16).to_le_bytes());
            out.extend_from_slice(t.name.as_bytes());
            out.push(t.dtype as u8);
            out.push(t.dims.len() as u8);
            for &d in &t.dims {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            match t.dtype {
                DType::F64 => t
                    .data
                    .iter()
                    .for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
                DType::F32 => t
                    .data
                    .iter()
                    .for_each(|v| out.extend_from_slice(&(*v as f32).to_le_bytes())),
            }
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    /// Parse an archive. Magic is checked first, then the tensor table is
    /// walked (running out of bytes is reported as truncation), then the
    /// checksum, then the version.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self, ArchiveError> {
        let mut magic = [0u8; 4];
        let head = bytes.get(..4).ok_or(ArchiveError::Truncated {
            tensor: "header".into(),
        })?;
        magic.copy_from_slice(head);
        if magic != MAGIC {
            return Err(ArchiveError::BadMagic(magic));
        }
        if bytes.len() < HEADER_LEN + CRC_LEN {
            return Err(ArchiveError::Truncated {
                tensor: "header".into(),
            });
        }
        // The structural walk runs over the whole buffer so a cut inside a
        // tensor is reported against that tensor, not the one before it.
        let body_end = bytes.len() - CRC_LEN;
        let mut cur = Cursor { buf: bytes, pos: 4 };
        let version = cur.u32("header")?;
        let count = cur.u32("header")?;

        let mut raw = Vec::new();
        for i in 0..count {
            let label = format!("tensor #{i}");
            let name_len = cur.u16(&label)? as usize;
            let name_bytes = cur.take(name_len, &label)?;
            let name = std::str::from_utf8(name_bytes).map(str::to_owned);
            let label = name.clone().unwrap_or(label);
            let tag = cur.u8(&label)?;
            let rank = cur.u8(&label)? as usize;
            let mut dims = Vec::with_capacity(rank);
            for _ in 0..rank {
                dims.push(cur.u64(&label)?);
            }
            let numel = dims
                .iter()
                .try_fold(1u64, |acc, &d| acc.checked_mul(d))
                .ok_or_else(|| ArchiveError::Truncated {
                    tensor: label.clone(),
                })?;
            let width = DType::from_tag(tag).map_or(8, DType::width) as u64;
            let nbytes = numel
                .checked_mul(width)
                .filter(|&n| n <= (cur.buf.len() - cur.pos) as u64)
                .ok_or_else(|| ArchiveError::Truncated {
                    tensor: label.clone(),
                })?;
            let data = cur.take(nbytes as usize, &label)?;
            raw.push((name, tag, dims, data, label));
        }
        if cur.pos > body_end {
            return Err(ArchiveError::Truncated {
                tensor: "checksum".into(),
            });
        }
        let stored = u32::from_le_bytes(bytes[body_end..].try_into().expect("4 bytes"));
        let computed = crc32fast::hash(&bytes[..body_end]);
        if stored != computed {
            return Err(ArchiveError::CrcMismatch { stored, computed });
        }
        if cur.pos != body_end {
            return Err(ArchiveError::Truncated {
                tensor: "trailing bytes".into(),
            });
        }
        if version != VERSION {
            return Err(ArchiveError::UnsupportedVersion(version));
        }

        let mut archive = TensorArchive::new();
        for (name, tag, dims, data, label) in raw {
            let name = name.map_err(|_| ArchiveError::BadName)?;
            let dtype =
                DType::from_tag(tag).ok_or(ArchiveError::UnknownDtype { tensor: label, tag })?;
            let values = match dtype {
                DType::F64 => data
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                    .collect(),
                DType::F32 => data
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
                    .collect(),
            };
            archive.push(Tensor {
                name,
                dtype,
                dims: dims.into_iter().map(|d| d as usize).collect(),
                data: values,
            })?;
        }
        Ok(archive)
    }

    /// Write atomically: the bytes go to a sibling temp file which is then
    /// renamed over `path`.
    pub fn save(&self, path: impl AsRef<Path>) -> crate::Result<()> {
        write_atomic(path.as_ref(), &self.to_bytes())
    }

    pub fn load(path: impl AsRef<Path>) -> crate::Result<Self> {
        let bytes = fs::read(path)?;
        Ok(Self::from_bytes(&bytes)?)
    }
}

/// Replace `path` with `bytes` via a temp file and rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> crate::Result<()> {
    let dir = path
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    let file_name = path
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let tmp = dir.join(format!(".{file_name}.tmp{}", std::process::id()));
    let res = (|| {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if res.is_err() {
        let _ = fs::remove_file(&tmp);
    }
    Ok(res?)
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, tensor: &str) -> Result<&'a [u8], ArchiveError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        match end {
            Some(end) => {
                let s = &self.buf[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(ArchiveError::Truncated {
                tensor: tensor.to_string(),
            }),
        }
    }

    fn u8(&mut self, t: &str) -> Result<u8, ArchiveError> {
        Ok(self.take(1, t)?[0])
    }

    fn u16(&mut self, t: &str) -> Result<u16, ArchiveError> {
        Ok(u16::from_le_bytes(
            self.take(2, t)?.try_into().expect("2 bytes"),
        ))
    }

    fn u32(&mut self, t: &str) -> Result<u32, ArchiveError> {
        Ok(u32::from_le_bytes(
            self.take(4, t)?.try_into().expect("4 bytes"),
        ))
    }

    fn u64(&mut self, t: &str) -> Result<u64, ArchiveError> {
        Ok(u64::from_le_bytes(
            self.take(8, t)?.try_into().expect("8 bytes"),
        ))
    }
}
