//! Parameter checkpoints: magic `BSEGPAR1`, a length-prefixed text header
//! holding the network spec, then every parameter tensor as an embedded
//! BTSR record, in schema order. Round-trips are bit-exact.

use std::fs;
use std::path::Path;

use super::btsr;
use crate::densenet::{schema, NetworkParams, NetworkSpec, ParamEntry};
use crate::tensor::Scalar;
use crate::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"BSEGPAR1";

pub fn save_checkpoint<S: Scalar>(
    spec: &NetworkSpec,
    params: &NetworkParams<S>,
    path: impl AsRef<Path>,
) -> Result<()> {
    let header = spec.to_header();
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(header.as_bytes());
    for entry in params.entries() {
        out.extend_from_slice(&btsr::to_bytes(&entry.tensor));
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn load_checkpoint<S: Scalar>(
    path: impl AsRef<Path>,
) -> Result<(NetworkSpec, NetworkParams<S>)> {
    let bytes = fs::read(&path)?;
    if bytes.len() < 12 || &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(Error::format(
            "magic",
            format!(
                "not a {} checkpoint",
                String::from_utf8_lossy(CHECKPOINT_MAGIC)
            ),
        ));
    }
    let header_len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let header_end = 12 + header_len;
    if bytes.len() < header_end {
        return Err(Error::format(
            "header",
            format!("header length {header_len} exceeds file size"),
        ));
    }
    let header = std::str::from_utf8(&bytes[12..header_end])
        .map_err(|_| Error::format("header", "spec header is not UTF-8"))?;
    let spec = NetworkSpec::from_header(header)?;

    let mut cursor = header_end;
    let mut entries = Vec::new();
    for decl in schema(&spec) {
        let (tensor, used) = btsr::from_bytes_prefix::<S>(&bytes[cursor..])
            .map_err(|e| Error::format("payload", format!("parameter {}: {e}", decl.id)))?;
        if tensor.shape() != decl.shape.as_slice() {
            return Err(Error::format(
                "payload",
                format!(
                    "parameter {} has shape {:?}, spec expects {:?}",
                    decl.id,
                    tensor.shape(),
                    decl.shape
                ),
            ));
        }
        cursor += used;
        entries.push(ParamEntry {
            id: decl.id,
            kind: decl.kind,
            tensor,
        });
    }
    if cursor != bytes.len() {
        return Err(Error::format(
            "payload",
            format!("{} trailing bytes after parameters", bytes.len() - cursor),
        ));
    }
    Ok((spec, NetworkParams::from_entries(entries)))
}
