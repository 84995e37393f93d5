//! `PRIMEMB1` matrix files: 8-byte magic, a dtype byte (0 = f32, 1 = f64),
//! a little-endian u32 rank, that many u32 dims, then the row-major payload.

use std::fs;
use std::path::Path;

use protomiss_core::Tensor;

use crate::error::{CliError, Result};

pub const MAGIC: &[u8; 8] = b"PRIMEMB1";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Dtype {
    F32 = 0,
    F64 = 1,
}

impl Dtype {
    fn width(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }
}

pub fn encode(t: &Tensor, dtype: Dtype) -> Vec<u8> {
    let mut out = Vec::with_capacity(13 + 4 * t.ndim() + dtype.width() * t.numel());
    out.extend_from_slice(MAGIC);
    out.push(dtype as u8);
    out.extend_from_slice(&(t.ndim() as u32).to_le_bytes());
    for &d in t.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in t.data() {
        match dtype {
            Dtype::F32 => out.extend_from_slice(&(v as f32).to_le_bytes()),
            Dtype::F64 => out.extend_from_slice(&v.to_le_bytes()),
        }
    }
    out
}

/// Decoding failure: byte offset and reason.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DecodeError {
    pub offset: u64,
    pub msg: String,
}

fn fail<T>(offset: usize, msg: impl Into<String>) -> std::result::Result<T, DecodeError> {
    Err(DecodeError { offset: offset as u64, msg: msg.into() })
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> std::result::Result<&'a [u8], DecodeError> {
        if self.bytes.len() - self.pos < n {
            return fail(self.bytes.len(), format!("file ends while reading {} ({} of {} bytes present)", what, self.bytes.len() - self.pos, n));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> std::result::Result<u32, DecodeError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}

pub fn decode(bytes: &[u8]) -> std::result::Result<Tensor, DecodeError> {
    let mut c = Cursor { bytes, pos: 0 };
    let magic = c.take(8, "magic")?;
    if magic != MAGIC {
        return fail(0, format!("bad magic {:?}", String::from_utf8_lossy(magic)));
    }
    let dtype = match c.take(1, "dtype")?[0] {
        0 => Dtype::F32,
        1 => Dtype::F64,
        code => return fail(8, format!("unknown dtype code {}", code)),
    };
    let rank = c.u32("rank")? as usize;
    if rank == 0 || rank > 8 {
        return fail(9, format!("unsupported rank {}", rank));
    }
    let mut shape = Vec::with_capacity(rank);
    for i in 0..rank {
        shape.push(c.u32(&format!("dim {}", i))? as usize);
    }
    let numel = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
    let Some(payload) = numel.and_then(|n| n.checked_mul(dtype.width())) else {
        return fail(13, format!("shape {:?} overflows", shape));
    };
    let raw = c.take(payload, "payload")?;
    if c.pos != bytes.len() {
        return fail(c.pos, format!("{} trailing bytes after payload", bytes.len() - c.pos));
    }
    let data: Vec<f64> = match dtype {
        Dtype::F32 => raw.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64).collect(),
        Dtype::F64 => raw.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().unwrap())).collect(),
    };
    if let Some(i) = data.iter().position(|v| !v.is_finite()) {
        return fail(c.pos - payload + i * dtype.width(), "non-finite value");
    }
    Tensor::new(shape, data).or_else(|e| fail(13, e.to_string()))
}

pub fn read(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            CliError::MissingFile(path.to_path_buf())
        } else {
            CliError::io(path, e)
        }
    })?;
    decode(&bytes).map_err(|e| CliError::Format { path: path.to_path_buf(), offset: e.offset, msg: e.msg })
}

pub fn write(path: &Path, t: &Tensor, dtype: Dtype) -> Result<()> {
    fs::write(path, encode(t, dtype)).map_err(|e| CliError::io(path, e))
}
