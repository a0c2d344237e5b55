//! `SSLG` tensor checkpoint files.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "SSLG"            4 bytes magic
//! version           u32 (currently 1)
//! tensor count      u32
//! per tensor:
//!   name length     u32
//!   name            UTF-8 bytes
//!   rank            u32
//!   dims            u32 × rank
//!   dtype tag       u8 (0 = f32)
//!   payload         f32 × product(dims), little-endian
//! ```

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::CheckpointError;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"SSLG";
pub const FORMAT_VERSION: u32 = 1;
pub const DTYPE_F32: u8 = 0;

pub type NamedTensors = Vec<(String, Tensor<f32>)>;

pub fn encode(tensors: &[(String, Tensor<f32>)]) -> Vec<u8> {
    let payload: usize = tensors.iter().map(|(n, t)| 13 + n.len() + 4 * t.rank() + 4 * t.numel()).sum();
    let mut out = Vec::with_capacity(12 + payload);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in tensors {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        out.push(DTYPE_F32);
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| {
            CheckpointError::Format(format!("truncated file while reading {what} at byte {}", self.pos))
        })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32, CheckpointError> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

/// Parses a complete checkpoint image. Nothing is returned unless every
/// tensor decodes.
pub fn decode(bytes: &[u8]) -> Result<NamedTensors, CheckpointError> {
    let mut r = Reader { buf: bytes, pos: 0 };
    let magic = r.take(4, "magic")?;
    if magic != MAGIC {
        return Err(CheckpointError::Format(format!("bad magic {magic:?}, expected \"SSLG\"")));
    }
    let version = r.u32("version")?;
    if version != FORMAT_VERSION {
        return Err(CheckpointError::Format(format!("unsupported version {version}")));
    }
    let count = r.u32("tensor count")? as usize;
    let mut out = Vec::with_capacity(count.min(4096));
    for i in 0..count {
        let len = r.u32("name length")? as usize;
        let name = std::str::from_utf8(r.take(len, "name")?)
            .map_err(|_| CheckpointError::Format(format!("tensor {i}: name is not UTF-8")))?
            .to_string();
        let rank = r.u32("rank")? as usize;
        let mut dims = Vec::with_capacity(rank.min(16));
        for _ in 0..rank {
            dims.push(r.u32("dims")? as usize);
        }
        let tag = r.take(1, "dtype")?[0];
        if tag != DTYPE_F32 {
            return Err(CheckpointError::Format(format!("tensor `{name}`: unknown dtype tag {tag}")));
        }
        let numel = dims.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d)).ok_or_else(|| {
            CheckpointError::Format(format!("tensor `{name}`: dimension product overflows"))
        })?;
        let raw = r.take(numel.checked_mul(4).unwrap_or(usize::MAX), "payload")?;
        let data = raw.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]])).collect();
        let t = Tensor::new(dims, data).map_err(|e| CheckpointError::Format(format!("tensor `{name}`: {e}")))?;
        out.push((name, t));
    }
    if r.pos != bytes.len() {
        return Err(CheckpointError::Format(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok(out)
}

/// Writes atomically: the file appears complete or not at all.
pub fn save(path: &Path, tensors: &[(String, Tensor<f32>)]) -> Result<(), CheckpointError> {
    let bytes = encode(tensors);
    let io = |source| CheckpointError::Io { path: path.to_path_buf(), source };
    let tmp = path.with_extension("sslg.tmp");
    {
        let mut f = fs::File::create(&tmp).map_err(io)?;
        f.write_all(&bytes).map_err(io)?;
        f.sync_all().map_err(io)?;
    }
    fs::rename(&tmp, path).map_err(io)
}

pub fn load(path: &Path) -> Result<NamedTensors, CheckpointError> {
    let bytes = fs::read(path).map_err(|source| CheckpointError::Io { path: path.to_path_buf(), source })?;
    decode(&bytes)
}

/// Looks up a tensor by name and checks its shape.
pub fn take_tensor<'a>(
    tensors: &'a [(String, Tensor<f32>)],
    name: &str,
    shape: &[usize],
) -> Result<&'a Tensor<f32>, CheckpointError> {
    let t = tensors
        .iter()
        .find(|(n, _)| n == name)
        .map(|(_, t)| t)
        .ok_or_else(|| CheckpointError::Missing(name.to_string()))?;
    if t.shape() != shape {
        return Err(CheckpointError::ShapeMismatch { name: name.into(), expected: shape.to_vec(), found: t.shape().to_vec() });
    }
    Ok(t)
}
