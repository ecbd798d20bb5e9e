//! `VOLF` volume files.
//!
//! ```text
//! "VOLF" | version: u32 = 1 | D: u64 | H: u64 | W: u64 | D*H*W x f32
//! ```
//!
//! Integers and floats are little-endian, voxels slice-major (D outermost).

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"VOLF";
pub const VERSION: u32 = 1;
const HEADER_LEN: usize = 4 + 4 + 3 * 8;

pub fn encode(volume: &Tensor<f32>) -> Result<Vec<u8>> {
    if volume.rank() != 3 {
        return Err(Error::InvalidShape(format!("volume must be [D, H, W], got {:?}", volume.shape())));
    }
    let mut out = Vec::with_capacity(HEADER_LEN + volume.numel() * 4);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    for &d in volume.shape() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for v in volume.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

/// `path` only labels errors.
pub fn decode(bytes: &[u8], path: &Path) -> Result<Tensor<f32>> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(Error::format(path, "bad magic, expected VOLF"));
    }
    if bytes.len() < HEADER_LEN {
        return Err(Error::format(path, "truncated header"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(Error::format(path, format!("unsupported VOLF version {version}")));
    }
    let mut dims = [0usize; 3];
    for (i, d) in dims.iter_mut().enumerate() {
        let raw = u64::from_le_bytes(bytes[8 + 8 * i..16 + 8 * i].try_into().unwrap());
        *d = usize::try_from(raw).map_err(|_| Error::format(path, "dimension overflow"))?;
        if *d == 0 {
            return Err(Error::format(path, "zero dimension"));
        }
    }
    let payload = dims
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| Error::format(path, "dimension overflow"))?;
    let body = &bytes[HEADER_LEN..];
    if body.len() < payload {
        return Err(Error::format(
            path,
            format!("truncated payload: header says {payload} bytes, found {}", body.len()),
        ));
    }
    if body.len() > payload {
        return Err(Error::format(path, "trailing bytes after voxel data"));
    }
    let data = body.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
    Tensor::new(dims.to_vec(), data)
}

pub fn read_volume(path: &Path) -> Result<Tensor<f32>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, path)
}

pub fn write_volume(path: &Path, volume: &Tensor<f32>) -> Result<()> {
    let bytes = encode(volume)?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}
