//! Binary PPM (P6) images and PGM (P5) label maps with maxval 255.

use std::fs;
use std::path::Path;

use super::image::{LabelMap, RgbImage};
use crate::error::{HgError, Result};

fn header(magic: &str, width: usize, height: usize) -> Vec<u8> {
    format!("{magic}\n{width} {height}\n255\n").into_bytes()
}

pub fn encode_ppm(image: &RgbImage) -> Vec<u8> {
    let mut out = header("P6", image.width, image.height);
    out.extend(image.to_bytes());
    out
}

pub fn encode_pgm(labels: &LabelMap) -> Vec<u8> {
    let mut out = header("P5", labels.width, labels.height);
    out.extend_from_slice(&labels.data);
    out
}

/// Returns `(width, height, payload)` after checking magic and maxval.
fn parse<'a>(bytes: &'a [u8], magic: &str) -> Result<(usize, usize, &'a [u8])> {
    let bad = |m: &str| HgError::Data(format!("{magic}: {m}"));
    let mut pos = 0;
    let mut fields = Vec::with_capacity(4);
    while fields.len() < 4 {
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
            return Err(bad("truncated header"));
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad("non-ASCII header"))?);
    }
    if fields[0] != magic {
        return Err(bad(&format!("wrong magic '{}'", fields[0])));
    }
    let num = |s: &str| {
        s.parse::<usize>()
            .map_err(|_| bad(&format!("bad number '{s}'")))
    };
    let (w, h, maxval) = (num(fields[1])?, num(fields[2])?, num(fields[3])?);
    if maxval != 255 {
        return Err(bad(&format!("maxval {maxval} unsupported")));
    }
    // Exactly one whitespace byte separates the header from the payload.
    Ok((w, h, bytes.get(pos + 1..).unwrap_or(&[])))
}

pub fn decode_ppm(bytes: &[u8]) -> Result<RgbImage> {
    let (w, h, payload) = parse(bytes, "P6")?;
    if payload.len() != w * h * 3 {
        return Err(HgError::Data(format!(
            "P6: expected {} bytes, got {}",
            w * h * 3,
            payload.len()
        )));
    }
    RgbImage::from_bytes(h, w, payload)
}

pub fn decode_pgm(bytes: &[u8]) -> Result<LabelMap> {
    let (w, h, payload) = parse(bytes, "P5")?;
    if payload.len() != w * h {
        return Err(HgError::Data(format!(
            "P5: expected {} bytes, got {}",
            w * h,
            payload.len()
        )));
    }
    LabelMap::new(h, w, payload.to_vec())
}

pub fn write_ppm(path: &Path, image: &RgbImage) -> Result<()> {
    Ok(fs::write(path, encode_ppm(image))?)
}

pub fn write_pgm(path: &Path, labels: &LabelMap) -> Result<()> {
    Ok(fs::write(path, encode_pgm(labels))?)
}

pub fn read_ppm(path: &Path) -> Result<RgbImage> {
    decode_ppm(&fs::read(path)?)
}

pub fn read_pgm(path: &Path) -> Result<LabelMap> {
    decode_pgm(&fs::read(path)?)
}
