//! Binary PGM (P5) and PPM (P6) with 8-bit samples.

use std::fs;
use std::path::Path;

use crate::error::{io_err, IoError, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    /// 1 for PGM, 3 for PPM.
    pub channels: usize,
    pub pixels: Vec<u8>,
}

fn encode(magic: &str, w: usize, h: usize, channels: usize, pixels: &[u8]) -> Result<Vec<u8>> {
    if pixels.len() != w * h * channels {
        return Err(IoError::Netpbm(format!(
            "{} bytes for a {w}x{h}x{channels} image",
            pixels.len()
        )));
    }
    let mut out = format!("{magic}\n{w} {h}\n255\n").into_bytes();
    out.extend_from_slice(pixels);
    Ok(out)
}

pub fn encode_pgm(w: usize, h: usize, pixels: &[u8]) -> Result<Vec<u8>> {
    encode("P5", w, h, 1, pixels)
}

pub fn encode_ppm(w: usize, h: usize, rgb: &[u8]) -> Result<Vec<u8>> {
    encode("P6", w, h, 3, rgb)
}

pub fn write_pgm(path: &Path, w: usize, h: usize, pixels: &[u8]) -> Result<()> {
    fs::write(path, encode_pgm(w, h, pixels)?).map_err(io_err(path))
}

pub fn write_ppm(path: &Path, w: usize, h: usize, rgb: &[u8]) -> Result<()> {
    fs::write(path, encode_ppm(w, h, rgb)?).map_err(io_err(path))
}

/// Parses P5/P6 with maxval 255; `#` comments in the header are skipped.
pub fn decode(bytes: &[u8]) -> Result<Image> {
    let bad = |m: &str| IoError::Netpbm(m.into());
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
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad("non-ascii header"))?);
    }
    // exactly one whitespace byte separates maxval from the raster
    pos += 1;
    let channels = match fields[0] {
        "P5" => 1,
        "P6" => 3,
        other => return Err(IoError::Netpbm(format!("unsupported magic {other:?}"))),
    };
    let num = |s: &str| {
        s.parse::<usize>()
            .map_err(|_| IoError::Netpbm(format!("bad number {s:?}")))
    };
    let (width, height, maxval) = (num(fields[1])?, num(fields[2])?, num(fields[3])?);
    if maxval != 255 {
        return Err(IoError::Netpbm(format!("maxval {maxval} unsupported")));
    }
    let need = width * height * channels;
    if bytes.len() < pos || bytes.len() - pos != need {
        return Err(IoError::Netpbm(format!(
            "raster holds {} bytes, header implies {need}",
            bytes.len().saturating_sub(pos)
        )));
    }
    Ok(Image {
        width,
        height,
        channels,
        pixels: bytes[pos..].to_vec(),
    })
}

pub fn read(path: &Path) -> Result<Image> {
    decode(&fs::read(path).map_err(io_err(path))?)
}
