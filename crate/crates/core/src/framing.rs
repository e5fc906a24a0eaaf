//! Byte-level wire format for a [`SymbolFrame`].
//!
//! ```text
//! magic  "SC" (0x53 0x43)
//! version 0x01
//! l      u16 LE   sequence length
//! n      u16 LE   features carried
//! d      u16 LE   reals per feature (even)
//! scale  f32 LE   power-normalization factor
//! bitmap ceil(l/8) bytes, MSB-first, bit i = feature i, pad bits zero
//! payload n*d f32 LE, consecutive pairs are (re, im)
//! ```

use num_complex::Complex32;
use thiserror::Error;

use crate::bitmap::MaskBitmap;
use crate::codec::SymbolFrame;

pub const MAGIC: [u8; 2] = [0x53, 0x43];
pub const VERSION: u8 = 0x01;
/// Fixed header size in bytes (magic, version, l, n, d, scale).
pub const HEADER_BYTES: usize = 13;
/// Assumed side-channel efficiency when converting bitmap and header bits
/// into equivalent symbols.
pub const SIDE_BITS_PER_SYMBOL: f64 = 2.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FrameError {
    #[error("bad magic bytes {0:02x?}")]
    BadMagic([u8; 2]),
    #[error("unsupported frame version {0}")]
    UnsupportedVersion(u8),
    #[error("truncated frame: expected {expected} bytes, got {actual}")]
    Truncated { expected: usize, actual: usize },
    #[error("{trailing} trailing bytes after the payload")]
    TrailingBytes { trailing: usize },
    #[error("bitmap popcount {popcount} disagrees with header n = {n}")]
    PopcountMismatch { popcount: usize, n: usize },
    #[error("nonzero pad bits in the last bitmap byte")]
    NonzeroPadBits,
    #[error("frame carries no features")]
    EmptyFrame,
    #[error("feature width {0} is odd")]
    OddWidth(usize),
    #[error("invalid scale {0}")]
    InvalidScale(f32),
    #[error("{field} = {value} exceeds the 16-bit field")]
    Capacity { field: &'static str, value: usize },
}

pub fn serialize(frame: &SymbolFrame) -> Result<Vec<u8>, FrameError> {
    let l = frame.bitmap().len();
    let n = frame.kept();
    let d = frame.feature_dim();
    for (field, value) in [("l", l), ("n", n), ("d", d)] {
        if value > u16::MAX as usize {
            return Err(FrameError::Capacity { field, value });
        }
    }
    if n == 0 {
        return Err(FrameError::EmptyFrame);
    }
    let scale = frame.scale().ok_or(FrameError::InvalidScale(f32::NAN))?;
    if !(scale.is_finite() && scale > 0.0) {
        return Err(FrameError::InvalidScale(scale));
    }
    let mut out = Vec::with_capacity(HEADER_BYTES + l.div_ceil(8) + n * d * 4);
    out.extend_from_slice(&MAGIC);
    out.push(VERSION);
    out.extend_from_slice(&(l as u16).to_le_bytes());
    out.extend_from_slice(&(n as u16).to_le_bytes());
    out.extend_from_slice(&(d as u16).to_le_bytes());
    out.extend_from_slice(&scale.to_le_bytes());
    out.extend(pack_bits(frame.bitmap().bits()));
    for z in frame.symbols() {
        out.extend_from_slice(&z.re.to_le_bytes());
        out.extend_from_slice(&z.im.to_le_bytes());
    }
    Ok(out)
}

pub fn deserialize(bytes: &[u8]) -> Result<SymbolFrame, FrameError> {
    if bytes.len() < HEADER_BYTES {
        return Err(FrameError::Truncated {
            expected: HEADER_BYTES,
            actual: bytes.len(),
        });
    }
    let magic = [bytes[0], bytes[1]];
    if magic != MAGIC {
        return Err(FrameError::BadMagic(magic));
    }
    if bytes[2] != VERSION {
        return Err(FrameError::UnsupportedVersion(bytes[2]));
    }
    let u16_at = |i: usize| u16::from_le_bytes([bytes[i], bytes[i + 1]]) as usize;
    let (l, n, d) = (u16_at(3), u16_at(5), u16_at(7));
    let scale = f32::from_le_bytes(bytes[9..13].try_into().unwrap());
    if n == 0 || l == 0 {
        return Err(FrameError::EmptyFrame);
    }
    if d % 2 != 0 {
        return Err(FrameError::OddWidth(d));
    }
    if !(scale.is_finite() && scale > 0.0) {
        return Err(FrameError::InvalidScale(scale));
    }
    let map_bytes = l.div_ceil(8);
    let expected = HEADER_BYTES + map_bytes + n * d * 4;
    if bytes.len() < expected {
        return Err(FrameError::Truncated {
            expected,
            actual: bytes.len(),
        });
    }
    if bytes.len() > expected {
        return Err(FrameError::TrailingBytes {
            trailing: bytes.len() - expected,
        });
    }
    let map = &bytes[HEADER_BYTES..HEADER_BYTES + map_bytes];
    let pad = map_bytes * 8 - l;
    if pad > 0 && map[map_bytes - 1] & ((1u8 << pad) - 1) != 0 {
        return Err(FrameError::NonzeroPadBits);
    }
    let bits: Vec<bool> = (0..l).map(|i| map[i / 8] & (0x80 >> (i % 8)) != 0).collect();
    let popcount = bits.iter().filter(|&&b| b).count();
    if popcount != n {
        return Err(FrameError::PopcountMismatch { popcount, n });
    }
    let bitmap = MaskBitmap::new(bits).map_err(|_| FrameError::EmptyFrame)?;
    let symbols = bytes[HEADER_BYTES + map_bytes..]
        .chunks_exact(8)
        .map(|c| {
            Complex32::new(
                f32::from_le_bytes(c[0..4].try_into().unwrap()),
                f32::from_le_bytes(c[4..8].try_into().unwrap()),
            )
        })
        .collect();
    Ok(SymbolFrame::new(symbols, bitmap, d / 2, Some(scale)).expect("sizes checked above"))
}

fn pack_bits(bits: &[bool]) -> Vec<u8> {
    let mut out = vec![0u8; bits.len().div_ceil(8)];
    for (i, _) in bits.iter().enumerate().filter(|(_, &b)| b) {
        out[i / 8] |= 0x80 >> (i % 8);
    }
    out
}

/// Side-information cost of the header plus bitmap in equivalent channel
/// symbols. Independent of `n` and of the payload width.
pub fn overhead_symbols(l: usize) -> f64 {
    ((HEADER_BYTES * 8 + l) as f64) / SIDE_BITS_PER_SYMBOL
}

/// Payload symbols plus side-information overhead.
pub fn total_cost_symbols(l: usize, n: usize, symbols_per_feature: usize) -> f64 {
    (n * symbols_per_feature) as f64 + overhead_symbols(l)
}
