//! Token grids and the `.qltk` bitstream.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! offset  size  field
//! 0       4     magic "QLTK"
//! 4       1     version (1)
//! 5       1     L, bits per token (1..=32)
//! 6       2     grid_h
//! 8       2     grid_w
//! 10      …     payload: ceil(grid_h·grid_w·L / 8) bytes
//! ```
//!
//! Token `n` (row-major) occupies global bit positions `n·L .. n·L + L`, least
//! significant bit first; global bit `g` is bit `g % 8` of payload byte `g / 8`.
//! Unused high bits of the last byte are zero. For example two 12-bit tokens
//! `0xABC, 0x123` pack to the payload bytes `BC 3A 12`.

use std::fs;
use std::io::Write;
use std::path::Path;

use thiserror::Error;

use crate::error::{Error as QlipError, Result};
use crate::model::QlipModel;
use crate::syndata::ImageTensor;

pub const MAGIC: [u8; 4] = *b"QLTK";
pub const VERSION: u8 = 1;
pub const HEADER_LEN: usize = 10;

/// Failure modes of [`read_bitstream`], each distinguishable by the caller.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum BitstreamError {
    #[error("bad magic {0:02x?}")]
    BadMagic([u8; 4]),
    #[error("unsupported version {0}")]
    UnsupportedVersion(u8),
    #[error("truncated stream: need {needed} bytes, have {have}")]
    Truncated { needed: usize, have: usize },
    #[error("{0} trailing bytes after payload")]
    TrailingBytes(usize),
    #[error("invalid bits per token {0}")]
    InvalidBits(u8),
    #[error("nonzero padding bits")]
    NonzeroPadding,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenGrid {
    pub height: usize,
    pub width: usize,
    pub bits: u8,
    /// Row-major token ids, each `< 2^bits`.
    pub ids: Vec<u32>,
}

impl TokenGrid {
    pub fn new(height: usize, width: usize, bits: u8, ids: Vec<u32>) -> Result<Self> {
        let g = TokenGrid { height, width, bits, ids };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        if self.bits == 0 || self.bits > 32 {
            return Err(QlipError::invalid(format!("bits per token {} outside 1..=32", self.bits)));
        }
        if self.height > u16::MAX as usize || self.width > u16::MAX as usize {
            return Err(QlipError::invalid("grid dimension exceeds 65535"));
        }
        if self.ids.len() != self.height * self.width {
            return Err(QlipError::shape(self.height * self.width, self.ids.len()));
        }
        if self.bits < 32 {
            if let Some(&bad) = self.ids.iter().find(|&&k| k >> self.bits != 0) {
                return Err(QlipError::invalid(format!("token {bad} needs more than {} bits", self.bits)));
            }
        }
        Ok(())
    }

    /// Information content of the grid, `grid_h·grid_w·L`.
    pub fn total_bits(&self) -> usize {
        self.height * self.width * self.bits as usize
    }
}

pub fn payload_len(height: usize, width: usize, bits: u8) -> usize {
    (height * width * bits as usize).div_ceil(8)
}

pub fn write_bitstream(grid: &TokenGrid) -> Result<Vec<u8>> {
    grid.validate()?;
    let mut out = Vec::with_capacity(HEADER_LEN + payload_len(grid.height, grid.width, grid.bits));
    out.extend_from_slice(&MAGIC);
    out.push(VERSION);
    out.push(grid.bits);
    out.extend_from_slice(&(grid.height as u16).to_le_bytes());
    out.extend_from_slice(&(grid.width as u16).to_le_bytes());
    let mut acc: u64 = 0;
    let mut filled = 0u32;
    for &id in &grid.ids {
        acc |= (id as u64) << filled;
        filled += grid.bits as u32;
        while filled >= 8 {
            out.push(acc as u8);
            acc >>= 8;
            filled -= 8;
        }
    }
    if filled > 0 {
        out.push(acc as u8);
    }
    Ok(out)
}

pub fn read_bitstream(bytes: &[u8]) -> std::result::Result<TokenGrid, BitstreamError> {
    if bytes.len() < 4 {
        return Err(BitstreamError::Truncated { needed: HEADER_LEN, have: bytes.len() });
    }
    let magic = [bytes[0], bytes[1], bytes[2], bytes[3]];
    if magic != MAGIC {
        return Err(BitstreamError::BadMagic(magic));
    }
    if bytes.len() < HEADER_LEN {
        return Err(BitstreamError::Truncated { needed: HEADER_LEN, have: bytes.len() });
    }
    if bytes[4] != VERSION {
        return Err(BitstreamError::UnsupportedVersion(bytes[4]));
    }
    let bits = bytes[5];
    if bits == 0 || bits > 32 {
        return Err(BitstreamError::InvalidBits(bits));
    }
    let height = u16::from_le_bytes([bytes[6], bytes[7]]) as usize;
    let width = u16::from_le_bytes([bytes[8], bytes[9]]) as usize;
    let need = HEADER_LEN + payload_len(height, width, bits);
    if bytes.len() < need {
        return Err(BitstreamError::Truncated { needed: need, have: bytes.len() });
    }
    if bytes.len() > need {
        return Err(BitstreamError::TrailingBytes(bytes.len() - need));
    }
    let payload = &bytes[HEADER_LEN..];
    let mask: u64 = (1u64 << bits) - 1;
    let mut ids = Vec::with_capacity(height * width);
    let mut acc: u64 = 0;
    let mut filled = 0u32;
    let mut next = payload.iter();
    for _ in 0..height * width {
        while filled < bits as u32 {
            acc |= (*next.next().expect("length checked above") as u64) << filled;
            filled += 8;
        }
        ids.push((acc & mask) as u32);
        acc >>= bits;
        filled -= bits as u32;
    }
    if acc != 0 {
        return Err(BitstreamError::NonzeroPadding);
    }
    Ok(TokenGrid { height, width, bits, ids })
}

/// Write via a sibling temp file and rename, so readers never see a partial file.
pub fn write_file_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension(format!(
        "{}.tmp{}",
        path.extension().and_then(|e| e.to_str()).unwrap_or(""),
        std::process::id()
    ));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn save_qltk(path: &Path, grid: &TokenGrid) -> Result<()> {
    write_file_atomic(path, &write_bitstream(grid)?)
}

pub fn load_qltk(path: &Path) -> Result<TokenGrid> {
    Ok(read_bitstream(&fs::read(path)?)?)
}

/// Tokenize one image with a trained tokenizer.
pub fn encode_image_to_tokens(model: &QlipModel, image: &ImageTensor) -> Result<TokenGrid> {
    let side = model.cfg.grid_side();
    let ids = model.tokenize(&[image])?.remove(0);
    TokenGrid::new(side, side, model.cfg.code_bits as u8, ids.into_iter().map(|k| k as u32).collect())
}

/// Render a token grid back to pixels.
pub fn decode_tokens_to_image(model: &QlipModel, grid: &TokenGrid) -> Result<ImageTensor> {
    grid.validate()?;
    let side = model.cfg.grid_side();
    if grid.height != side || grid.width != side {
        return Err(QlipError::shape(format!("{side}x{side} grid"), format!("{}x{}", grid.height, grid.width)));
    }
    if grid.bits as usize != model.cfg.code_bits {
        return Err(QlipError::invalid(format!(
            "grid uses {} bits per token, tokenizer has {}",
            grid.bits, model.cfg.code_bits
        )));
    }
    let ids: Vec<u64> = grid.ids.iter().map(|&k| k as u64).collect();
    Ok(model.detokenize(&[ids])?.remove(0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn documented_byte_example() {
        let g = TokenGrid::new(1, 2, 12, vec![0xABC, 0x123]).unwrap();
        let b = write_bitstream(&g).unwrap();
        assert_eq!(&b[..HEADER_LEN], b"QLTK\x01\x0c\x01\x00\x02\x00");
        assert_eq!(&b[HEADER_LEN..], &[0xBC, 0x3A, 0x12]);
    }

    #[test]
    fn eight_by_eight_twelve_bit_payload() {
        let g = TokenGrid::new(8, 8, 12, (0..64).map(|i| i * 61).collect()).unwrap();
        let b = write_bitstream(&g).unwrap();
        assert_eq!(b.len() - HEADER_LEN, 96);
        assert_eq!(g.total_bits(), 768);
        assert_eq!(read_bitstream(&b).unwrap(), g);
    }

    #[test]
    fn distinct_errors() {
        let g = TokenGrid::new(2, 3, 5, vec![1, 2, 3, 4, 5, 31]).unwrap();
        let good = write_bitstream(&g).unwrap();
        let mut m = good.clone();
        m[0] ^= 0x01;
        assert!(matches!(read_bitstream(&m), Err(BitstreamError::BadMagic(_))));
        let mut v = good.clone();
        v[4] = 9;
        assert_eq!(read_bitstream(&v), Err(BitstreamError::UnsupportedVersion(9)));
        assert!(matches!(read_bitstream(&good[..good.len() - 1]), Err(BitstreamError::Truncated { .. })));
        assert!(matches!(read_bitstream(&good[..6]), Err(BitstreamError::Truncated { .. })));
        let mut t = good.clone();
        t.push(0);
        assert_eq!(read_bitstream(&t), Err(BitstreamError::TrailingBytes(1)));
        let mut p = good.clone();
        *p.last_mut().unwrap() |= 0x80;
        assert_eq!(read_bitstream(&p), Err(BitstreamError::NonzeroPadding));
        let mut z = good;
        z[5] = 0;
        assert_eq!(read_bitstream(&z), Err(BitstreamError::InvalidBits(0)));
    }

    #[test]
    fn rejects_invalid_grids() {
        assert!(TokenGrid::new(2, 2, 3, vec![0, 1, 2, 8]).is_err());
        assert!(TokenGrid::new(2, 2, 3, vec![0, 1, 2]).is_err());
        assert!(TokenGrid::new(1, 1, 0, vec![0]).is_err());
    }

    #[test]
    fn atomic_file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("g.qltk");
        let g = TokenGrid::new(4, 4, 12, (0..16).map(|i| 4095 - i * 7).collect()).unwrap();
        save_qltk(&path, &g).unwrap();
        assert_eq!(load_qltk(&path).unwrap(), g);
        assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 1);
    }

    fn grid_strategy() -> impl Strategy<Value = TokenGrid> {
        (1usize..12, 1usize..12, 1u8..=32).prop_flat_map(|(h, w, bits)| {
            let max = if bits == 32 { u32::MAX } else { (1u32 << bits) - 1 };
            proptest::collection::vec(0..=max, h * w).prop_map(move |ids| TokenGrid { height: h, width: w, bits, ids })
        })
    }

    proptest! {
        #[test]
        fn write_then_read_is_identity(g in grid_strategy()) {
            let bytes = write_bitstream(&g).unwrap();
            prop_assert_eq!(bytes.len(), HEADER_LEN + payload_len(g.height, g.width, g.bits));
            let back = read_bitstream(&bytes).unwrap();
            prop_assert_eq!(write_bitstream(&back).unwrap(), bytes);
            prop_assert_eq!(back, g);
        }
    }
}
