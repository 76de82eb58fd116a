//! Image files: raw `.bin` (little-endian f32, HWC, square) and binary `.ppm`.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::syndata::ImageTensor;

pub fn encode_bin(img: &ImageTensor) -> Vec<u8> {
    img.data.iter().flat_map(|v| v.to_le_bytes()).collect()
}

/// Side length is inferred from the byte count, which must be `4·3·S²`.
pub fn decode_bin(bytes: &[u8]) -> Result<ImageTensor> {
    let bad = |d: String| Error::Format { context: "image .bin".into(), detail: d };
    if !bytes.len().is_multiple_of(12) {
        return Err(bad(format!("{} bytes is not a whole number of RGB f32 pixels", bytes.len())));
    }
    let pixels = bytes.len() / 12;
    let side = (pixels as f64).sqrt().round() as usize;
    if side * side != pixels || side == 0 {
        return Err(bad(format!("{pixels} pixels do not form a square image")));
    }
    let data: Vec<f32> = bytes.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]])).collect();
    if data.iter().any(|v| !v.is_finite()) {
        return Err(bad("non-finite pixel value".into()));
    }
    ImageTensor::new(side, side, data)
}

pub fn encode_ppm(img: &ImageTensor) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend(img.data.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    out
}

pub fn decode_ppm(bytes: &[u8]) -> Result<ImageTensor> {
    let bad = |d: &str| Error::Format { context: "image .ppm".into(), detail: d.to_string() };
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated header"));
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad("header is not ASCII"))?.to_string());
    }
    pos += 1;
    if fields[0] != "P6" || fields[3] != "255" {
        return Err(bad("only 8-bit binary P6 is supported"));
    }
    let w: usize = fields[1].parse().map_err(|_| bad("bad width"))?;
    let h: usize = fields[2].parse().map_err(|_| bad("bad height"))?;
    let body = bytes.get(pos..).ok_or_else(|| bad("missing pixel data"))?;
    if body.len() != w * h * 3 {
        return Err(bad("pixel data length does not match header"));
    }
    ImageTensor::new(h, w, body.iter().map(|&b| b as f32 / 255.0).collect())
}

fn is_ppm(path: &Path) -> bool {
    path.extension().and_then(|e| e.to_str()).is_some_and(|e| e.eq_ignore_ascii_case("ppm"))
}

/// Read by extension: `.ppm` or raw f32 otherwise.
pub fn read_image(path: &Path) -> Result<ImageTensor> {
    let bytes = fs::read(path)?;
    if is_ppm(path) {
        decode_ppm(&bytes)
    } else {
        decode_bin(&bytes)
    }
}

pub fn write_image(path: &Path, img: &ImageTensor) -> Result<()> {
    let bytes = if is_ppm(path) { encode_ppm(img) } else { encode_bin(img) };
    crate::tokcodec::write_file_atomic(path, &bytes)
}
