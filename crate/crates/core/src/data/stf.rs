//! STF: a minimal little-endian tensor container.
//!
//! ```text
//! offset  size        field
//! 0       4           magic "STF1"
//! 4       1           dtype (1 = f64)
//! 5       4           rank, u32 LE
//! 9       8·rank      dims, u64 LE each
//! ...     8·Π dims    payload, f64 LE, row-major
//! ```

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::autodiff::Tensor;
use crate::error::{Result, ScfmError};

pub const MAGIC: &[u8; 4] = b"STF1";
pub const DTYPE_F64: u8 = 1;

pub fn encode(tensor: &Tensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(9 + 8 * tensor.rank() + 8 * tensor.numel());
    out.extend_from_slice(MAGIC);
    out.push(DTYPE_F64);
    out.extend_from_slice(&(tensor.rank() as u32).to_le_bytes());
    for &d in tensor.shape() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for v in tensor.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode(bytes: &[u8]) -> Result<Tensor> {
    let fmt = |m: &str| ScfmError::Format(m.to_string());
    if bytes.len() < 9 {
        return Err(fmt("file shorter than the STF header"));
    }
    if &bytes[0..4] != MAGIC {
        return Err(fmt("bad magic, expected STF1"));
    }
    if bytes[4] != DTYPE_F64 {
        return Err(ScfmError::Format(format!("unsupported dtype code {}", bytes[4])));
    }
    let rank = u32::from_le_bytes(bytes[5..9].try_into().expect("4 bytes")) as usize;
    let dims_end = 9usize
        .checked_add(rank.checked_mul(8).ok_or_else(|| fmt("rank overflow"))?)
        .ok_or_else(|| fmt("rank overflow"))?;
    if bytes.len() < dims_end {
        return Err(fmt("truncated dims"));
    }
    let mut shape = Vec::with_capacity(rank);
    let mut count: usize = 1;
    for i in 0..rank {
        let at = 9 + 8 * i;
        let d = u64::from_le_bytes(bytes[at..at + 8].try_into().expect("8 bytes"));
        let d = usize::try_from(d).map_err(|_| fmt("dimension does not fit in memory"))?;
        count = count.checked_mul(d).ok_or_else(|| fmt("element count overflow"))?;
        shape.push(d);
    }
    let payload = &bytes[dims_end..];
    if Some(payload.len()) != count.checked_mul(8) {
        return Err(ScfmError::Format(format!(
            "payload is {} bytes, dims {:?} require {}",
            payload.len(),
            shape,
            count.saturating_mul(8)
        )));
    }
    let data = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    Tensor::new(shape, data)
}

/// Writes `bytes` to `path` through a temporary sibling and a rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp: PathBuf = {
        let mut name = path
            .file_name()
            .map(|n| n.to_os_string())
            .unwrap_or_default();
        name.push(format!(".tmp{}", std::process::id()));
        path.with_file_name(name)
    };
    let write = || -> std::io::Result<()> {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    };
    write().map_err(|e| {
        let _ = fs::remove_file(&tmp);
        ScfmError::io(path, e)
    })
}

pub fn stf_write(path: impl AsRef<Path>, tensor: &Tensor) -> Result<()> {
    if !tensor.is_finite() {
        return Err(ScfmError::Domain("STF payload must be finite".into()));
    }
    write_atomic(path.as_ref(), &encode(tensor))
}

pub fn stf_read(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| ScfmError::io(path, e))?;
    decode(&bytes)
}
