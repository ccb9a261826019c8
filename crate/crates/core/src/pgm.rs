//! Binary 8-bit PGM (P5) images.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Encodes an `[H,W]` or `[1,H,W]` tensor with values in `[0,1]` as
/// `round(255·v)`, clamping out-of-range values.
pub fn encode(t: &Tensor) -> Result<Vec<u8>> {
    let (h, w) = plane_dims(t)?;
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(t.data().iter().map(|&v| (255.0 * v.clamp(0.0, 1.0)).round() as u8));
    Ok(out)
}

/// Encodes a binary mask as `{0, 255}`.
pub fn encode_mask(mask: &Tensor) -> Result<Vec<u8>> {
    if mask.data().iter().any(|&v| v != 0.0 && v != 1.0) {
        return Err(Error::Contract("mask must be binary".into()));
    }
    encode(mask)
}

fn plane_dims(t: &Tensor) -> Result<(usize, usize)> {
    match *t.shape() {
        [h, w] | [1, h, w] => Ok((h, w)),
        _ => Err(Error::Shape(format!("PGM needs [H,W] or [1,H,W], got {:?}", t.shape()))),
    }
}

/// Decodes a P5 file with maxval 255 into an `[H,W]` tensor of `v/255`.
pub fn decode(bytes: &[u8]) -> Result<Tensor> {
    let mut pos = 0;
    let mut fields = Vec::with_capacity(4);
    while fields.len() < 4 {
        // skip whitespace and comments
        while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::Data("truncated PGM header".into()));
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| Error::Data("bad PGM header".into()))?);
    }
    if fields[0] != "P5" {
        return Err(Error::Data(format!("not a binary PGM (magic {:?})", fields[0])));
    }
    let num = |s: &str| s.parse::<usize>().map_err(|_| Error::Data(format!("bad PGM header field {s:?}")));
    let (w, h, maxval) = (num(fields[1])?, num(fields[2])?, num(fields[3])?);
    if maxval != 255 {
        return Err(Error::Data(format!("only maxval 255 is supported, got {maxval}")));
    }
    // exactly one whitespace byte separates the header from the raster
    pos += 1;
    let raster = bytes.get(pos..).unwrap_or_default();
    if raster.len() != w * h {
        return Err(Error::Data(format!("PGM raster has {} bytes, expected {}", raster.len(), w * h)));
    }
    Tensor::new(&[h, w], raster.iter().map(|&b| b as f64 / 255.0).collect())
}

pub fn write(path: &Path, t: &Tensor) -> Result<()> {
    Ok(fs::write(path, encode(t)?)?)
}

pub fn write_mask(path: &Path, mask: &Tensor) -> Result<()> {
    Ok(fs::write(path, encode_mask(mask)?)?)
}

pub fn read(path: &Path) -> Result<Tensor> {
    decode(&fs::read(path)?).map_err(|e| match e {
        Error::Data(m) => Error::Data(format!("{}: {m}", path.display())),
        other => other,
    })
}

/// Reads a mask PGM, accepting only the values 0 and 255.
pub fn read_mask(path: &Path) -> Result<Tensor> {
    let t = read(path)?;
    if t.data().iter().any(|&v| v != 0.0 && v != 1.0) {
        return Err(Error::Data(format!("{}: mask contains values other than 0 and 255", path.display())));
    }
    Ok(t)
}
