//! Separate source/channel coding reference chain: block DCT with
//! Exp-Golomb entropy coding, Hamming(7,4), BPSK.
//!
//! Bit errors that survive the channel code usually break the variable
//! length code, so quality collapses abruptly below some SNR.

use num_complex::Complex32;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::channel::{transmit_symbols, ChannelConfig, ChannelReport};
use crate::codec::Image;
use crate::error::{Error, Result};

/// Value substituted for every pixel when decoding fails.
pub const FAILURE_GRAY: f32 = 0.5;
/// Longest accepted run of leading zeros in an Exp-Golomb prefix.
const MAX_PREFIX: usize = 32;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BaselineConfig {
    /// Quantizer step scale; larger is coarser.
    pub quality: f64,
    pub block_size: usize,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        Self {
            quality: 1.0,
            block_size: 8,
        }
    }
}

impl BaselineConfig {
    pub fn validate(&self, height: usize, width: usize) -> Result<()> {
        if !(self.quality > 0.0 && self.quality.is_finite()) {
            return Err(Error::InvalidArgument(format!("quality {} must be positive", self.quality)));
        }
        if self.block_size == 0 || height % self.block_size != 0 || width % self.block_size != 0 {
            return Err(Error::Dimension(format!("{height}x{width} image with {}px blocks", self.block_size)));
        }
        Ok(())
    }

    fn step(&self, u: usize, v: usize) -> f64 {
        self.quality * (1.0 + 0.5 * (u + v) as f64)
    }
}

/// Why a bitstream could not be decoded.
#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum DecodeFailure {
    #[error("bitstream ended early")]
    Exhausted,
    #[error("Exp-Golomb prefix longer than {MAX_PREFIX} bits")]
    PrefixTooLong,
    #[error("coefficient count {0} exceeds the block size")]
    CountTooLarge(u64),
    #[error("{0} bits left after the last block")]
    TrailingBits(usize),
    #[error("length prefix {declared} exceeds the {available} available bits")]
    BadLength { declared: usize, available: usize },
}

/// Bit sequence with its length.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Bitstream {
    bits: Vec<bool>,
}

impl Bitstream {
    pub fn new(bits: Vec<bool>) -> Self {
        Self { bits }
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    /// Container: `u32` LE bit count, then the bits packed MSB-first with
    /// zero padding in the last byte.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = (self.bits.len() as u32).to_le_bytes().to_vec();
        out.extend(pack_msb(&self.bits));
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> std::result::Result<Self, DecodeFailure> {
        if bytes.len() < 4 {
            return Err(DecodeFailure::Exhausted);
        }
        let declared = u32::from_le_bytes(bytes[..4].try_into().unwrap()) as usize;
        let available = (bytes.len() - 4) * 8;
        if declared > available || available - declared >= 8 {
            return Err(DecodeFailure::BadLength { declared, available });
        }
        let bits = unpack_msb(&bytes[4..]);
        Ok(Self::new(bits[..declared].to_vec()))
    }

    /// Container as a bit sequence, as it goes over the channel.
    pub fn container_bits(&self) -> Vec<bool> {
        let mut out = unpack_msb(&(self.bits.len() as u32).to_le_bytes());
        out.extend_from_slice(&self.bits);
        out
    }

    /// Parses [`Bitstream::container_bits`] output; bits past the declared
    /// length (channel-code padding) are ignored.
    pub fn from_container_bits(bits: &[bool]) -> std::result::Result<Self, DecodeFailure> {
        if bits.len() < 32 {
            return Err(DecodeFailure::Exhausted);
        }
        let bytes = pack_msb(&bits[..32]);
        let declared = u32::from_le_bytes(bytes[..4].try_into().unwrap()) as usize;
        let available = bits.len() - 32;
        if declared > available {
            return Err(DecodeFailure::BadLength { declared, available });
        }
        Ok(Self::new(bits[32..32 + declared].to_vec()))
    }
}

fn pack_msb(bits: &[bool]) -> Vec<u8> {
    let mut out = vec![0u8; bits.len().div_ceil(8)];
    for (i, &b) in bits.iter().enumerate() {
        if b {
            out[i / 8] |= 0x80 >> (i % 8);
        }
    }
    out
}

fn unpack_msb(bytes: &[u8]) -> Vec<bool> {
    bytes.iter().flat_map(|&byte| (0..8).map(move |i| byte & (0x80 >> i) != 0)).collect()
}

struct BitWriter {
    bits: Vec<bool>,
}

impl BitWriter {
    fn bit(&mut self, b: bool) {
        self.bits.push(b);
    }

    /// Unsigned Exp-Golomb.
    fn ue(&mut self, v: u64) {
        let x = v + 1;
        let len = 64 - x.leading_zeros() as usize;
        self.bits.extend(std::iter::repeat_n(false, len - 1));
        for i in (0..len).rev() {
            self.bits.push((x >> i) & 1 == 1);
        }
    }

    /// Signed Exp-Golomb: 0, 1, -1, 2, -2, ...
    fn se(&mut self, v: i64) {
        let k = if v > 0 { 2 * v as u64 - 1 } else { 2 * v.unsigned_abs() };
        self.ue(k);
    }
}

struct BitReader<'a> {
    bits: &'a [bool],
    pos: usize,
}

impl BitReader<'_> {
    fn bit(&mut self) -> std::result::Result<bool, DecodeFailure> {
        let b = *self.bits.get(self.pos).ok_or(DecodeFailure::Exhausted)?;
        self.pos += 1;
        Ok(b)
    }

    fn ue(&mut self) -> std::result::Result<u64, DecodeFailure> {
        let mut zeros = 0;
        while !self.bit()? {
            zeros += 1;
            if zeros > MAX_PREFIX {
                return Err(DecodeFailure::PrefixTooLong);
            }
        }
        let mut x = 1u64;
        for _ in 0..zeros {
            x = (x << 1) | self.bit()? as u64;
        }
        Ok(x - 1)
    }

    fn se(&mut self) -> std::result::Result<i64, DecodeFailure> {
        let k = self.ue()?;
        Ok(if k % 2 == 1 { k.div_ceil(2) as i64 } else { -((k / 2) as i64) })
    }
}

/// Orthonormal DCT-II basis, `basis[u * n + x]`.
fn dct_basis(n: usize) -> Vec<f64> {
    let mut b = vec![0.0; n * n];
    for u in 0..n {
        let a = if u == 0 { (1.0 / n as f64).sqrt() } else { (2.0 / n as f64).sqrt() };
        for x in 0..n {
            b[u * n + x] = a * (std::f64::consts::PI * (2 * x + 1) as f64 * u as f64 / (2 * n) as f64).cos();
        }
    }
    b
}

/// Coefficient positions in zigzag order.
fn zigzag(n: usize) -> Vec<(usize, usize)> {
    let mut order: Vec<(usize, usize)> = (0..n).flat_map(|u| (0..n).map(move |v| (u, v))).collect();
    order.sort_by_key(|&(u, v)| {
        let s = u + v;
        (s, if s % 2 == 0 { v } else { u })
    });
    order
}

fn dct2(block: &[f64], basis: &[f64], n: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * n];
    for u in 0..n {
        for v in 0..n {
            let mut acc = 0.0;
            for y in 0..n {
                for x in 0..n {
                    acc += basis[u * n + y] * basis[v * n + x] * block[y * n + x];
                }
            }
            out[u * n + v] = acc;
        }
    }
    out
}

fn idct2(coef: &[f64], basis: &[f64], n: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * n];
    for y in 0..n {
        for x in 0..n {
            let mut acc = 0.0;
            for u in 0..n {
                for v in 0..n {
                    acc += basis[u * n + y] * basis[v * n + x] * coef[u * n + v];
                }
            }
            out[y * n + x] = acc;
        }
    }
    out
}

/// Block DCT source coder.
///
/// Per block, one flag bit: `1` when every channel has a zero DC difference
/// and no AC coefficients. Otherwise, per channel: the DC difference to the
/// previous block of that channel (signed Exp-Golomb), the number of AC
/// coefficients up to the last nonzero one in zigzag order (unsigned), and
/// those coefficients (signed).
pub fn transform_encode(img: &Image, cfg: &BaselineConfig) -> Result<Bitstream> {
    cfg.validate(img.height(), img.width())?;
    let n = cfg.block_size;
    let basis = dct_basis(n);
    let zz = zigzag(n);
    let mut w = BitWriter { bits: Vec::new() };
    let mut prev_dc = [0i64; 3];
    for by in 0..img.height() / n {
        for bx in 0..img.width() / n {
            let mut quantized = Vec::with_capacity(3);
            for c in 0..3 {
                let block: Vec<f64> = (0..n * n)
                    .map(|i| img.get(by * n + i / n, bx * n + i % n, c) as f64 * 255.0 - 127.5)
                    .collect();
                let coef = dct2(&block, &basis, n);
                let q: Vec<i64> = zz.iter().map(|&(u, v)| (coef[u * n + v] / cfg.step(u, v)).round() as i64).collect();
                quantized.push(q);
            }
            let skip = (0..3).all(|c| quantized[c][0] == prev_dc[c] && quantized[c][1..].iter().all(|&q| q == 0));
            w.bit(skip);
            if skip {
                continue;
            }
            for c in 0..3 {
                let q = &quantized[c];
                w.se(q[0] - prev_dc[c]);
                prev_dc[c] = q[0];
                let count = q.iter().rposition(|&v| v != 0).filter(|&p| p > 0).unwrap_or(0);
                w.ue(count as u64);
                for &v in &q[1..=count] {
                    w.se(v);
                }
            }
        }
    }
    Ok(Bitstream::new(w.bits))
}

/// Inverse of [`transform_encode`]. Any inconsistency in the bitstream is a
/// [`DecodeFailure`].
pub fn transform_decode(bs: &Bitstream, cfg: &BaselineConfig, height: usize, width: usize) -> Result<std::result::Result<Image, DecodeFailure>> {
    cfg.validate(height, width)?;
    Ok(decode_inner(bs, cfg, height, width))
}

fn decode_inner(bs: &Bitstream, cfg: &BaselineConfig, height: usize, width: usize) -> std::result::Result<Image, DecodeFailure> {
    let n = cfg.block_size;
    let basis = dct_basis(n);
    let zz = zigzag(n);
    let mut r = BitReader { bits: bs.bits(), pos: 0 };
    let mut prev_dc = [0i64; 3];
    let mut pixels = vec![0.0f32; height * width * 3];
    for by in 0..height / n {
        for bx in 0..width / n {
            let skip = r.bit()?;
            for c in 0..3 {
                let mut q = vec![0i64; n * n];
                if skip {
                    q[0] = prev_dc[c];
                } else {
                    q[0] = prev_dc[c].saturating_add(r.se()?);
                    prev_dc[c] = q[0];
                    let count = r.ue()?;
                    if count >= (n * n) as u64 {
                        return Err(DecodeFailure::CountTooLarge(count));
                    }
                    for slot in q.iter_mut().skip(1).take(count as usize) {
                        *slot = r.se()?;
                    }
                }
                let mut coef = vec![0.0; n * n];
                for (k, &(u, v)) in zz.iter().enumerate() {
                    coef[u * n + v] = q[k] as f64 * cfg.step(u, v);
                }
                let block = idct2(&coef, &basis, n);
                for (i, &v) in block.iter().enumerate() {
                    let (y, x) = (by * n + i / n, bx * n + i % n);
                    pixels[(y * width + x) * 3 + c] = ((v + 127.5) / 255.0).clamp(0.0, 1.0) as f32;
                }
            }
        }
    }
    if r.pos != bs.len() {
        return Err(DecodeFailure::TrailingBits(bs.len() - r.pos));
    }
    Ok(Image::new(height, width, pixels).expect("clamped pixels"))
}

/// Encodes 4-bit groups as `p1 p2 d1 p4 d2 d3 d4`; the input is zero-padded
/// to a multiple of four.
pub fn hamming74_encode(bits: &[bool]) -> Vec<bool> {
    let mut out = Vec::with_capacity(bits.len().div_ceil(4) * 7);
    for chunk in bits.chunks(4) {
        let d = |i: usize| chunk.get(i).copied().unwrap_or(false);
        let (d1, d2, d3, d4) = (d(0), d(1), d(2), d(3));
        out.extend([d1 ^ d2 ^ d4, d1 ^ d3 ^ d4, d1, d2 ^ d3 ^ d4, d2, d3, d4]);
    }
    out
}

/// Hard-decision syndrome decoding; corrects one error per 7-bit block.
/// A trailing partial block is dropped.
pub fn hamming74_decode(bits: &[bool]) -> Vec<bool> {
    let mut out = Vec::with_capacity(bits.len() / 7 * 4);
    for block in bits.chunks_exact(7) {
        let mut b: [bool; 7] = block.try_into().unwrap();
        let s1 = b[0] ^ b[2] ^ b[4] ^ b[6];
        let s2 = b[1] ^ b[2] ^ b[5] ^ b[6];
        let s4 = b[3] ^ b[4] ^ b[5] ^ b[6];
        let syndrome = s1 as usize | (s2 as usize) << 1 | (s4 as usize) << 2;
        if syndrome != 0 {
            b[syndrome - 1] = !b[syndrome - 1];
        }
        out.extend([b[2], b[4], b[5], b[6]]);
    }
    out
}

/// BPSK channel symbols needed for `bits` source bits after Hamming(7,4).
pub fn coded_symbol_count(bits: usize) -> usize {
    bits.div_ceil(4) * 7
}

/// Result of one image through the reference chain.
#[derive(Clone, Debug, PartialEq)]
pub struct BaselineOutcome {
    pub image: Image,
    /// Channel uses (one BPSK symbol per coded bit).
    pub symbols: usize,
    pub failure: Option<DecodeFailure>,
    pub report: ChannelReport,
}

/// Encodes, protects, modulates, sends and decodes one image. A decoding
/// failure yields the uniform gray image.
pub fn baseline_transmit(img: &Image, cfg: &BaselineConfig, ch: &ChannelConfig) -> Result<BaselineOutcome> {
    let bs = transform_encode(img, cfg)?;
    let container = bs.container_bits();
    let coded = hamming74_encode(&container);
    let symbols: Vec<Complex32> = coded.iter().map(|&b| Complex32::new(if b { -1.0 } else { 1.0 }, 0.0)).collect();
    let (rx, report) = transmit_symbols(&symbols, ch)?;
    let hard: Vec<bool> = rx.iter().map(|z| z.re < 0.0).collect();
    let decoded = hamming74_decode(&hard);
    let result = Bitstream::from_container_bits(&decoded).and_then(|b| decode_inner(&b, cfg, img.height(), img.width()));
    let (image, failure) = match result {
        Ok(image) => (image, None),
        Err(e) => (Image::filled(img.height(), img.width(), FAILURE_GRAY), Some(e)),
    };
    Ok(BaselineOutcome {
        image,
        symbols: coded.len(),
        failure,
        report,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn noisy_image(seed: u64) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Image::from_fn(16, 16, |y, x, c| 0.3 + 0.02 * (x + y + c) as f32 + 0.1 * rng.random::<f32>())
    }

    #[test]
    fn exp_golomb_round_trip() {
        let mut w = BitWriter { bits: Vec::new() };
        let vals = [0i64, 1, -1, 2, -2, 7, -300, 65535];
        for &v in &vals {
            w.se(v);
        }
        w.ue(0);
        w.ue(41);
        assert_eq!(&w.bits[..1], &[true]);
        let mut r = BitReader { bits: &w.bits, pos: 0 };
        for &v in &vals {
            assert_eq!(r.se().unwrap(), v);
        }
        assert_eq!(r.ue().unwrap(), 0);
        assert_eq!(r.ue().unwrap(), 41);
        assert_eq!(r.pos, w.bits.len());
    }

    #[test]
    fn dct_is_orthonormal() {
        let b = dct_basis(8);
        let block: Vec<f64> = (0..64).map(|i| (i as f64 * 0.37).sin() * 50.0).collect();
        let back = idct2(&dct2(&block, &b, 8), &b, 8);
        for (a, c) in block.iter().zip(&back) {
            assert!((a - c).abs() < 1e-9);
        }
        let flat = dct2(&[10.0; 64], &b, 8);
        assert!((flat[0] - 80.0).abs() < 1e-9);
        assert!(flat[1..].iter().all(|v| v.abs() < 1e-9));
    }

    #[test]
    fn zigzag_order_starts_like_jpeg() {
        let z = zigzag(8);
        assert_eq!(&z[..6], &[(0, 0), (0, 1), (1, 0), (2, 0), (1, 1), (0, 2)]);
        assert_eq!(z[63], (7, 7));
    }

    #[test]
    fn mid_gray_costs_little() {
        let img = Image::filled(32, 32, 0.5);
        let bs = transform_encode(&img, &BaselineConfig::default()).unwrap();
        assert!((bs.len() as f64) / 1024.0 < 0.1, "{} bits", bs.len());
        let out = transform_decode(&bs, &BaselineConfig::default(), 32, 32).unwrap().unwrap();
        assert!(out.mse(&img) < 1e-6);
    }

    #[test]
    fn round_trip_parses() {
        let img = noisy_image(3);
        let cfg = BaselineConfig::default();
        let bs = transform_encode(&img, &cfg).unwrap();
        let out = transform_decode(&bs, &cfg, 16, 16).unwrap().unwrap();
        assert!(out.psnr(&img) > 30.0);
    }

    #[test]
    fn empty_bitstream_fails() {
        let r = transform_decode(&Bitstream::default(), &BaselineConfig::default(), 8, 8).unwrap();
        assert_eq!(r, Err(DecodeFailure::Exhausted));
    }

    #[test]
    fn container_round_trip() {
        let bs = Bitstream::new(vec![true, false, true, true, false, false, true, false, true, true]);
        assert_eq!(Bitstream::from_bytes(&bs.to_bytes()).unwrap(), bs);
        let mut bits = bs.container_bits();
        bits.extend([false, false]);
        assert_eq!(Bitstream::from_container_bits(&bits).unwrap(), bs);
        assert!(Bitstream::from_bytes(&[]).is_err());
    }

    #[test]
    fn hamming_small() {
        let data = vec![true, false, true, true, false, true];
        let coded = hamming74_encode(&data);
        assert_eq!(coded.len(), 14);
        let dec = hamming74_decode(&coded);
        assert_eq!(&dec[..6], &data[..]);
        assert_eq!(&dec[6..], &[false, false]);
    }

    #[test]
    fn noiseless_chain_matches_source_round_trip() {
        let img = noisy_image(9);
        let cfg = BaselineConfig::default();
        let out = baseline_transmit(&img, &cfg, &ChannelConfig::noiseless(crate::channel::ChannelKind::RayleighSlow, 4)).unwrap();
        let bs = transform_encode(&img, &cfg).unwrap();
        let direct = transform_decode(&bs, &cfg, 16, 16).unwrap().unwrap();
        assert_eq!(out.image, direct);
        assert_eq!(out.failure, None);
        assert_eq!(out.symbols, coded_symbol_count(bs.len() + 32));
    }
}
