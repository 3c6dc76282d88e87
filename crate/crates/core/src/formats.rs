//! Netpbm images (binary PPM/PGM) and PFM float maps.
//!
//! PFM rows are stored bottom-up with a negative scale marking
//! little-endian data; in memory everything is top-down row-major.

use std::path::Path;

use crate::error::FormatError;
use crate::image::{quantize_u8, Image};

fn read_file(path: &Path) -> Result<Vec<u8>, FormatError> {
    std::fs::read(path).map_err(|e| FormatError::io(path, e))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), FormatError> {
    std::fs::write(path, bytes).map_err(|e| FormatError::io(path, e))
}

/// Splits a header of `fields` whitespace-separated tokens (with `#`
/// comments) and returns them with the offset of the data that follows the
/// single whitespace byte after the last token.
fn header<'a>(bytes: &'a [u8], fields: usize, path: &Path) -> Result<(Vec<&'a str>, usize), FormatError> {
    let mut tokens = Vec::with_capacity(fields);
    let mut i = 0;
    while tokens.len() < fields {
        while i < bytes.len() && bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        if i < bytes.len() && bytes[i] == b'#' {
            while i < bytes.len() && bytes[i] != b'\n' {
                i += 1;
            }
            continue;
        }
        if i >= bytes.len() {
            return Err(FormatError::malformed(path, i as u64, "truncated header"));
        }
        let start = i;
        while i < bytes.len() && !bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        let tok = std::str::from_utf8(&bytes[start..i])
            .map_err(|_| FormatError::malformed(path, start as u64, "non-ASCII header"))?;
        tokens.push(tok);
    }
    if i >= bytes.len() {
        return Err(FormatError::malformed(path, i as u64, "missing data after header"));
    }
    Ok((tokens, i + 1))
}

fn parse_dim(tok: &str, offset: usize, path: &Path) -> Result<usize, FormatError> {
    tok.parse::<usize>()
        .ok()
        .filter(|v| *v > 0)
        .ok_or_else(|| FormatError::malformed(path, offset as u64, format!("bad dimension {tok:?}")))
}

fn check_len(bytes: &[u8], start: usize, needed: usize, path: &Path) -> Result<(), FormatError> {
    if bytes.len() < start + needed {
        return Err(FormatError::malformed(
            path,
            bytes.len() as u64,
            format!("truncated data: expected {} bytes after offset {start}", needed),
        ));
    }
    Ok(())
}

pub fn encode_ppm(img: &Image) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend(img.pixels.iter().flat_map(|p| p.map(quantize_u8)));
    out
}

pub fn decode_ppm(bytes: &[u8], path: &Path) -> Result<Image, FormatError> {
    let (tok, start) = header(bytes, 4, path)?;
    if tok[0] != "P6" {
        return Err(FormatError::malformed(path, 0, format!("expected P6, found {:?}", tok[0])));
    }
    let (w, h) = (parse_dim(tok[1], 3, path)?, parse_dim(tok[2], 3, path)?);
    if tok[3] != "255" {
        return Err(FormatError::malformed(path, start as u64 - 1, "only 8-bit PPM is supported"));
    }
    check_len(bytes, start, w * h * 3, path)?;
    let pixels = bytes[start..start + w * h * 3]
        .chunks_exact(3)
        .map(|c| [c[0] as f64 / 255.0, c[1] as f64 / 255.0, c[2] as f64 / 255.0])
        .collect();
    Ok(Image::from_pixels(w, h, pixels))
}

pub fn write_ppm(path: &Path, img: &Image) -> Result<(), FormatError> {
    write_file(path, &encode_ppm(img))
}

pub fn read_ppm(path: &Path) -> Result<Image, FormatError> {
    decode_ppm(&read_file(path)?, path)
}

/// Binary mask as PGM: 0 for `false`, 255 for `true`.
pub fn encode_pgm_mask(mask: &[bool], width: usize, height: usize) -> Vec<u8> {
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend(mask.iter().map(|&m| if m { 255u8 } else { 0 }));
    out
}

/// Reads a PGM mask; values of 128 and above are `true`.
pub fn decode_pgm_mask(bytes: &[u8], path: &Path) -> Result<(Vec<bool>, usize, usize), FormatError> {
    let (tok, start) = header(bytes, 4, path)?;
    if tok[0] != "P5" {
        return Err(FormatError::malformed(path, 0, format!("expected P5, found {:?}", tok[0])));
    }
    let (w, h) = (parse_dim(tok[1], 3, path)?, parse_dim(tok[2], 3, path)?);
    if tok[3] != "255" {
        return Err(FormatError::malformed(path, start as u64 - 1, "only 8-bit PGM is supported"));
    }
    check_len(bytes, start, w * h, path)?;
    Ok((bytes[start..start + w * h].iter().map(|&v| v >= 128).collect(), w, h))
}

pub fn write_pgm_mask(path: &Path, mask: &[bool], width: usize, height: usize) -> Result<(), FormatError> {
    write_file(path, &encode_pgm_mask(mask, width, height))
}

pub fn read_pgm_mask(path: &Path) -> Result<(Vec<bool>, usize, usize), FormatError> {
    decode_pgm_mask(&read_file(path)?, path)
}

/// A float map with 1 or 3 channels, top-down row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct FloatMap {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<f32>,
}

pub fn encode_pfm(map: &FloatMap) -> Vec<u8> {
    let tag = if map.channels == 3 { "PF" } else { "Pf" };
    let mut out = format!("{tag}\n{} {}\n-1.0\n", map.width, map.height).into_bytes();
    let row = map.width * map.channels;
    for y in (0..map.height).rev() {
        for v in &map.data[y * row..(y + 1) * row] {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn decode_pfm(bytes: &[u8], path: &Path) -> Result<FloatMap, FormatError> {
    let (tok, start) = header(bytes, 4, path)?;
    let channels = match tok[0] {
        "PF" => 3,
        "Pf" => 1,
        other => return Err(FormatError::malformed(path, 0, format!("expected PF or Pf, found {other:?}"))),
    };
    let (w, h) = (parse_dim(tok[1], 3, path)?, parse_dim(tok[2], 3, path)?);
    let scale: f64 = tok[3]
        .parse()
        .map_err(|_| FormatError::malformed(path, start as u64 - 1, format!("bad scale {:?}", tok[3])))?;
    let little = scale < 0.0;
    let row = w * channels;
    check_len(bytes, start, row * h * 4, path)?;
    let mut data = vec![0f32; row * h];
    for (file_row, y) in (0..h).rev().enumerate() {
        for i in 0..row {
            let at = start + (file_row * row + i) * 4;
            let b: [u8; 4] = bytes[at..at + 4].try_into().unwrap();
            data[y * row + i] = if little { f32::from_le_bytes(b) } else { f32::from_be_bytes(b) };
        }
    }
    Ok(FloatMap {
        width: w,
        height: h,
        channels,
        data,
    })
}

pub fn write_pfm(path: &Path, map: &FloatMap) -> Result<(), FormatError> {
    write_file(path, &encode_pfm(map))
}

pub fn read_pfm(path: &Path) -> Result<FloatMap, FormatError> {
    decode_pfm(&read_file(path)?, path)
}
