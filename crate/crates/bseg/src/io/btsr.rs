//! BTSR: a minimal binary tensor container.
//!
//! Layout: magic `BTSR`, version byte (1), dtype code byte (1 = f32,
//! 2 = f64), rank byte, little-endian u32 dimensions, then the row-major
//! little-endian payload. Readers validate every header field and the
//! payload length before returning data.

use std::fs;
use std::path::Path;

use crate::tensor::{Scalar, Tensor};
use crate::{Error, Result};

pub const BTSR_MAGIC: &[u8; 4] = b"BTSR";
pub const BTSR_VERSION: u8 = 1;

pub fn to_bytes<S: Scalar>(tensor: &Tensor<S>) -> Vec<u8> {
    let mut out = Vec::with_capacity(7 + 4 * tensor.rank() + tensor.numel() * S::BYTE_WIDTH);
    out.extend_from_slice(BTSR_MAGIC);
    out.push(BTSR_VERSION);
    out.push(S::DTYPE_CODE);
    out.push(tensor.rank() as u8);
    for &dim in tensor.shape() {
        out.extend_from_slice(&(dim as u32).to_le_bytes());
    }
    for &v in tensor.data() {
        v.write_le(&mut out);
    }
    out
}

pub fn from_bytes<S: Scalar>(bytes: &[u8]) -> Result<Tensor<S>> {
    let (tensor, used) = from_bytes_prefix(bytes)?;
    if used != bytes.len() {
        return Err(Error::format(
            "payload",
            format!("{} trailing bytes after tensor payload", bytes.len() - used),
        ));
    }
    Ok(tensor)
}

/// Decode one tensor from the front of `bytes`, returning it and the
/// number of bytes consumed. Lets containers embed BTSR records back to
/// back.
pub fn from_bytes_prefix<S: Scalar>(bytes: &[u8]) -> Result<(Tensor<S>, usize)> {
    if bytes.len() < 7 {
        return Err(Error::format(
            "header",
            format!(
                "file of {} bytes is shorter than a BTSR header",
                bytes.len()
            ),
        ));
    }
    if &bytes[0..4] != BTSR_MAGIC {
        return Err(Error::format(
            "magic",
            format!("expected {BTSR_MAGIC:?}, got {:?}", &bytes[0..4]),
        ));
    }
    if bytes[4] != BTSR_VERSION {
        return Err(Error::format(
            "version",
            format!("expected {BTSR_VERSION}, got {}", bytes[4]),
        ));
    }
    if bytes[5] != S::DTYPE_CODE {
        return Err(Error::format(
            "dtype",
            format!("expected dtype code {}, got {}", S::DTYPE_CODE, bytes[5]),
        ));
    }
    let rank = bytes[6] as usize;
    let dims_end = 7 + 4 * rank;
    if bytes.len() < dims_end {
        return Err(Error::format(
            "dims",
            format!(
                "rank {rank} needs {} header bytes, file has {}",
                dims_end,
                bytes.len()
            ),
        ));
    }
    let shape: Vec<usize> = (0..rank)
        .map(|i| u32::from_le_bytes(bytes[7 + 4 * i..11 + 4 * i].try_into().unwrap()) as usize)
        .collect();
    let numel: usize = shape.iter().product();
    let payload_len = numel * S::BYTE_WIDTH;
    let end = dims_end + payload_len;
    if bytes.len() < end {
        return Err(Error::format(
            "payload",
            format!(
                "shape {shape:?} expects {payload_len} payload bytes, got {}",
                bytes.len() - dims_end
            ),
        ));
    }
    let data: Vec<S> = bytes[dims_end..end]
        .chunks_exact(S::BYTE_WIDTH)
        .map(S::read_le)
        .collect();
    Ok((Tensor::new(shape, data)?, end))
}

pub fn write_btsr<S: Scalar>(tensor: &Tensor<S>, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, to_bytes(tensor))?;
    Ok(())
}

pub fn read_btsr<S: Scalar>(path: impl AsRef<Path>) -> Result<Tensor<S>> {
    from_bytes(&fs::read(path)?)
}
