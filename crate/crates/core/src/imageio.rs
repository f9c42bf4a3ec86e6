//! Image files: binary PPM (P6) and the `RAWT` raw tensor container.
//!
//! `RAWT` layout: magic `RAWT`, u32 rank, `rank` u32 dims, then little-endian
//! f32 payload. Images are stored as rank 3 `[3, H, W]`.

use std::path::Path;

use crate::encoders::ImageTensor;
use crate::error::{Error, Result};

pub const RAWT_MAGIC: &[u8; 4] = b"RAWT";

pub fn decode_ppm(bytes: &[u8]) -> Result<ImageTensor> {
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
            return Err(Error::Format("truncated PPM header".into()));
        }
        fields.push(&bytes[start..pos]);
    }
    if fields[0] != b"P6" {
        return Err(Error::Format("not a binary PPM (P6)".into()));
    }
    let num = |f: &[u8]| -> Result<usize> {
        std::str::from_utf8(f)
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Format("bad PPM header number".into()))
    };
    let (w, h, maxval) = (num(fields[1])?, num(fields[2])?, num(fields[3])?);
    if maxval == 0 || maxval > 255 {
        return Err(Error::Format(format!("unsupported PPM maxval {maxval}")));
    }
    // single whitespace byte separates header and raster
    pos += 1;
    let raster = bytes
        .get(pos..pos + 3 * w * h)
        .ok_or_else(|| Error::Format("truncated PPM raster".into()))?;
    let mut img = ImageTensor::filled(h, w, [0.0; 3]);
    let maxval = maxval as f32;
    for y in 0..h {
        for x in 0..w {
            let at = 3 * (y * w + x);
            img.set_pixel(
                y,
                x,
                [
                    raster[at] as f32 / maxval,
                    raster[at + 1] as f32 / maxval,
                    raster[at + 2] as f32 / maxval,
                ],
            );
        }
    }
    Ok(img)
}

pub fn encode_ppm(img: &ImageTensor) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", img.width(), img.height()).into_bytes();
    for y in 0..img.height() {
        for x in 0..img.width() {
            for v in img.pixel(y, x) {
                out.push((v * 255.0).round() as u8);
            }
        }
    }
    out
}

pub fn encode_rawt(img: &ImageTensor) -> Vec<u8> {
    let mut out = RAWT_MAGIC.to_vec();
    out.extend_from_slice(&3u32.to_le_bytes());
    for d in [3, img.height(), img.width()] {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in img.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_rawt(bytes: &[u8]) -> Result<ImageTensor> {
    let u32_at = |at: usize| -> Result<usize> {
        bytes
            .get(at..at + 4)
            .map(|b| u32::from_le_bytes(b.try_into().unwrap()) as usize)
            .ok_or_else(|| Error::Format("truncated RAWT header".into()))
    };
    if bytes.get(..4) != Some(RAWT_MAGIC) {
        return Err(Error::Format("missing RAWT magic".into()));
    }
    let rank = u32_at(4)?;
    if rank != 3 {
        return Err(Error::Format(format!("RAWT image must be rank 3, got {rank}")));
    }
    let dims: Vec<usize> = (0..rank).map(|i| u32_at(8 + 4 * i)).collect::<Result<_>>()?;
    if dims[0] != 3 {
        return Err(Error::Format(format!("RAWT image must have 3 channels, got {}", dims[0])));
    }
    let start = 8 + 4 * rank;
    let n = dims.iter().product::<usize>();
    let payload = bytes
        .get(start..start + 4 * n)
        .ok_or_else(|| Error::Format("truncated RAWT payload".into()))?;
    if start + 4 * n != bytes.len() {
        return Err(Error::Format("trailing bytes after RAWT payload".into()));
    }
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    ImageTensor::new(dims[1], dims[2], data)
}

/// Reads a PPM or RAWT image, chosen by the file's leading bytes.
pub fn load_image(path: &Path) -> Result<ImageTensor> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.starts_with(RAWT_MAGIC) {
        decode_rawt(&bytes)
    } else {
        decode_ppm(&bytes)
    }
}

pub fn save_image(path: &Path, img: &ImageTensor) -> Result<()> {
    let bytes = match path.extension().and_then(|e| e.to_str()) {
        Some("rawt") => encode_rawt(img),
        _ => encode_ppm(img),
    };
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}
