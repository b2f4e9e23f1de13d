//! PNM images: P6 (PPM) for color, P5 (PGM) for grayscale and masks,
//! maxval 255. Masks store raw class indices as gray levels and round-trip
//! losslessly; float images quantize to 8 bits on write.

use std::fs;
use std::path::Path;

use crate::synthdata::Mask;
use crate::tensor::{Scalar, Tensor};
use crate::{Error, Result};

fn parse_header<'a>(bytes: &'a [u8], magic: &str) -> Result<(usize, usize, &'a [u8])> {
    if bytes.len() < 2 || &bytes[0..2] != magic.as_bytes() {
        return Err(Error::format(
            "magic",
            format!("expected {magic}, got {:?}", &bytes[..bytes.len().min(2)]),
        ));
    }
    // After the magic: three whitespace-separated integers (width, height,
    // maxval), with optional # comments, then a single whitespace byte.
    let mut pos = 2usize;
    let mut fields = [0usize; 3];
    for field in fields.iter_mut() {
        // skip whitespace and comments
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                break;
            }
        }
        let start = pos;
        while pos < bytes.len() && bytes[pos].is_ascii_digit() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::format("header", "missing integer field"));
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .unwrap()
            .parse()
            .map_err(|_| Error::format("header", "integer field out of range"))?;
    }
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(Error::format("header", "missing separator before payload"));
    }
    pos += 1;
    let (w, h, maxval) = (fields[0], fields[1], fields[2]);
    if maxval != 255 {
        return Err(Error::format(
            "maxval",
            format!("only maxval 255 is supported, got {maxval}"),
        ));
    }
    if w == 0 || h == 0 {
        return Err(Error::format("header", format!("degenerate size {w}x{h}")));
    }
    Ok((w, h, &bytes[pos..]))
}

fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Write a `(H, W, 3)` image as P6 or a `(H, W, 1)` image as P5.
/// Values are clamped to [0, 1] and quantized to 8 bits.
pub fn write_image(image: &Tensor<f32>, path: impl AsRef<Path>) -> Result<()> {
    let dims = image.spatial_dims()?;
    if dims.batched {
        return Err(Error::dim("write_image takes a single (H,W,C) image"));
    }
    let (h, w) = (dims.height, dims.width);
    let magic = match dims.channels {
        3 => "P6",
        1 => "P5",
        c => {
            return Err(Error::dim(format!(
                "write_image supports 1 or 3 channels, got {c}"
            )))
        }
    };
    let mut out = format!("{magic}\n{w} {h}\n255\n").into_bytes();
    out.extend(image.data().iter().map(|&v| quantize(v)));
    fs::write(path, out)?;
    Ok(())
}

/// Read a P6 image as `(H, W, 3)` or a P5 image as `(H, W, 1)`, scaled
/// back to [0, 1].
pub fn read_image(path: impl AsRef<Path>) -> Result<Tensor<f32>> {
    let bytes = fs::read(path)?;
    let (magic, channels) = match bytes.first_chunk::<2>() {
        Some(b"P6") => ("P6", 3usize),
        Some(b"P5") => ("P5", 1usize),
        _ => {
            return Err(Error::format(
                "magic",
                "expected a P5 or P6 file".to_string(),
            ))
        }
    };
    let (w, h, payload) = parse_header(&bytes, magic)?;
    let expected = w * h * channels;
    if payload.len() != expected {
        return Err(Error::format(
            "payload",
            format!("expected {expected} bytes, got {}", payload.len()),
        ));
    }
    Tensor::new(
        vec![h, w, channels],
        payload.iter().map(|&b| b as f32 / 255.0).collect(),
    )
}

/// Write a mask as P5 with raw class indices as gray levels.
pub fn write_mask_pgm(mask: &Mask, path: impl AsRef<Path>) -> Result<()> {
    let mut out = format!("P5\n{} {}\n255\n", mask.width, mask.height).into_bytes();
    out.extend_from_slice(&mask.labels);
    fs::write(path, out)?;
    Ok(())
}

pub fn read_mask_pgm(path: impl AsRef<Path>) -> Result<Mask> {
    let bytes = fs::read(path)?;
    let (w, h, payload) = parse_header(&bytes, "P5")?;
    if payload.len() != w * h {
        return Err(Error::format(
            "payload",
            format!("expected {} bytes, got {}", w * h, payload.len()),
        ));
    }
    Mask::new(h, w, payload.to_vec())
}

/// Render a scalar map as a P5 heatmap with per-file min/max normalization.
/// The range is recorded in a sidecar `<stem>.minmax.txt` next to the
/// image; returns `(min, max)`.
pub fn write_heatmap_pgm<S: Scalar>(map: &Tensor<S>, path: impl AsRef<Path>) -> Result<(f64, f64)> {
    let path = path.as_ref();
    if map.rank() != 2 {
        return Err(Error::dim(format!(
            "heatmaps are (H, W) maps, got shape {:?}",
            map.shape()
        )));
    }
    let (h, w) = (map.shape()[0], map.shape()[1]);
    let mut min = f64::INFINITY;
    let mut max = f64::NEG_INFINITY;
    for &v in map.data() {
        let v = v.to_f64();
        min = min.min(v);
        max = max.max(v);
    }
    let span = max - min;
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(map.data().iter().map(|&v| {
        if span > 0.0 {
            ((v.to_f64() - min) / span * 255.0).round() as u8
        } else {
            0
        }
    }));
    fs::write(path, out)?;
    let sidecar = path.with_extension("minmax.txt");
    fs::write(sidecar, format!("min={min:e}\nmax={max:e}\n"))?;
    Ok((min, max))
}
