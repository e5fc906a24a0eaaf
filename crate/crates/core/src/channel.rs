//! Non-trainable wireless channels: AWGN and slow (block) Rayleigh fading
//! with perfect-CSI zero-forcing equalization.
//!
//! SNR is defined per complex symbol against a unit-power frame, so the
//! noise variance per complex symbol is `10^(-snr_db / 10)` (half of it in
//! each real component). `snr_db = +inf` selects the noiseless channel.

use std::ops::Range;

use num_complex::{Complex, Complex32, Complex64};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::codec::SymbolFrame;
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Below this gain magnitude a frame is flagged as a deep fade.
pub const DEEP_FADE: f64 = 1e-8;

/// Tolerance on the unit-power precondition of [`transmit`].
const POWER_TOLERANCE: f64 = 1e-4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChannelKind {
    Awgn,
    RayleighSlow,
}

impl std::fmt::Display for ChannelKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ChannelKind::Awgn => "awgn",
            ChannelKind::RayleighSlow => "rayleigh_slow",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelConfig {
    pub kind: ChannelKind,
    pub snr_db: f64,
    pub seed: u64,
}

impl ChannelConfig {
    pub fn new(kind: ChannelKind, snr_db: f64, seed: u64) -> Self {
        Self { kind, snr_db, seed }
    }

    /// Noise-free channel of the given kind (fading still applies).
    pub fn noiseless(kind: ChannelKind, seed: u64) -> Self {
        Self::new(kind, f64::INFINITY, seed)
    }

    pub fn validate(&self) -> Result<()> {
        if self.snr_db.is_nan() || self.snr_db == f64::NEG_INFINITY {
            return Err(Error::InvalidArgument(format!("invalid snr_db {}", self.snr_db)));
        }
        Ok(())
    }

    pub fn noise_variance(&self) -> f64 {
        noise_variance(self.snr_db)
    }
}

/// `10^(-snr_db / 10)`; zero for the `+inf` sentinel.
pub fn noise_variance(snr_db: f64) -> f64 {
    if snr_db == f64::INFINITY {
        0.0
    } else {
        10f64.powf(-snr_db / 10.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ChannelReport {
    /// Realized fading gain (Rayleigh only).
    pub h: Option<Complex64>,
    pub noise_variance: f64,
    /// `|h| < 1e-8`; the frame is still equalized, not resampled.
    pub deep_fade: bool,
}

/// Random state of one frame's passage through the channel.
#[derive(Clone, Debug, PartialEq)]
pub struct Realization {
    pub gain: Option<Complex64>,
    pub noise: Vec<Complex64>,
}

/// Draws the fading gain (first, Rayleigh only) and then `len` noise
/// samples. Both the evaluation and the training channel use this so their
/// forward maths agree for a given generator state.
pub fn draw_realization<R: Rng>(kind: ChannelKind, noise_variance: f64, len: usize, rng: &mut R) -> Realization {
    let gain = match kind {
        ChannelKind::Awgn => None,
        ChannelKind::RayleighSlow => Some(complex_gaussian(1.0, rng)),
    };
    let noise = (0..len).map(|_| complex_gaussian(noise_variance, rng)).collect();
    Realization { gain, noise }
}

/// Circularly-symmetric complex Gaussian with total variance `var`.
fn complex_gaussian<R: Rng>(var: f64, rng: &mut R) -> Complex64 {
    let s = (var / 2.0).sqrt();
    let re: f64 = StandardNormal.sample(rng);
    let im: f64 = StandardNormal.sample(rng);
    Complex::new(re * s, im * s)
}

/// Full channel output in double precision.
#[derive(Clone, Debug)]
pub struct Propagation {
    /// `h x + n` (or `x + n` for AWGN), before equalization.
    pub faded: Vec<Complex64>,
    /// Zero-forcing output `y / h` (equal to `faded` for AWGN).
    pub equalized: Vec<Complex64>,
    pub report: ChannelReport,
}

pub fn propagate(symbols: &[Complex32], cfg: &ChannelConfig) -> Result<Propagation> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let nv = cfg.noise_variance();
    let real = draw_realization(cfg.kind, nv, symbols.len(), &mut rng);
    let h = real.gain.unwrap_or(Complex::new(1.0, 0.0));
    let faded: Vec<Complex64> = symbols
        .iter()
        .zip(&real.noise)
        .map(|(x, n)| h * Complex::new(x.re as f64, x.im as f64) + n)
        .collect();
    let equalized = match real.gain {
        Some(h) => faded.iter().map(|y| y / h).collect(),
        None => faded.clone(),
    };
    Ok(Propagation {
        faded,
        equalized,
        report: ChannelReport {
            h: real.gain,
            noise_variance: nv,
            deep_fade: real.gain.is_some_and(|h| h.norm() < DEEP_FADE),
        },
    })
}

/// Equalized channel output for a raw symbol sequence (one fading block).
pub fn transmit_symbols(symbols: &[Complex32], cfg: &ChannelConfig) -> Result<(Vec<Complex32>, ChannelReport)> {
    let p = propagate(symbols, cfg)?;
    let out = p.equalized.iter().map(|z| Complex::new(z.re as f32, z.im as f32)).collect();
    Ok((out, p.report))
}

/// Sends one power-normalized frame; the bitmap and scale metadata are
/// carried over unchanged (side information is assumed error-free).
pub fn transmit(frame: &SymbolFrame, cfg: &ChannelConfig) -> Result<(SymbolFrame, ChannelReport)> {
    let power = frame.mean_power();
    if (power - 1.0).abs() > POWER_TOLERANCE {
        return Err(Error::PowerConstraint(power));
    }
    let (symbols, report) = transmit_symbols(frame.symbols(), cfg)?;
    Ok((frame.with_symbols(symbols), report))
}

/// Channel used inside the training graph.
///
/// The forward pass matches [`propagate`] (noise and fading are drawn from
/// the same distributions); in the backward pass noise and gain are
/// constants, so the map is identity-plus-noise for AWGN and
/// multiplication by the fixed `h` for Rayleigh. There are no trainable
/// parameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingChannel {
    pub kind: ChannelKind,
    pub snr_db_low: f64,
    pub snr_db_high: f64,
}

/// What the training channel drew for one batch.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingDraw {
    pub snr_db: f64,
    pub gains: Vec<Option<Complex64>>,
}

impl TrainingChannel {
    pub fn new(kind: ChannelKind, snr_db_low: f64, snr_db_high: f64) -> Self {
        assert!(snr_db_low <= snr_db_high, "empty SNR range");
        Self {
            kind,
            snr_db_low,
            snr_db_high,
        }
    }

    /// One SNR per batch, uniform over `[low, high]` dB.
    pub fn draw_snr<R: Rng>(&self, rng: &mut R) -> f64 {
        if self.snr_db_low == self.snr_db_high {
            self.snr_db_low
        } else {
            rng.random_range(self.snr_db_low..=self.snr_db_high)
        }
    }

    /// Passes the power-normalized rows of `x` through the channel, one
    /// fading block per row range in `frames`, and returns the equalized
    /// output.
    pub fn apply<T: Real, R: Rng>(&self, g: &mut Graph<'_, T>, x: Var, frames: &[Range<usize>], rng: &mut R) -> (Var, TrainingDraw) {
        let snr_db = self.draw_snr(rng);
        self.apply_at(g, x, frames, snr_db, rng)
    }

    /// As [`TrainingChannel::apply`] with a fixed SNR.
    pub fn apply_at<T: Real, R: Rng>(&self, g: &mut Graph<'_, T>, x: Var, frames: &[Range<usize>], snr_db: f64, rng: &mut R) -> (Var, TrainingDraw) {
        let nv = noise_variance(snr_db);
        let cols = g.value(x).cols();
        assert_eq!(cols % 2, 0, "symbol rows must hold whole complex pairs");
        let mut noise = Tensor::<T>::zeros(g.value(x).rows(), cols);
        let mut gains = Vec::with_capacity(frames.len());
        for range in frames {
            let symbols = (range.end - range.start) * cols / 2;
            let real = draw_realization(self.kind, nv, symbols, rng);
            let span = &mut noise.data_mut()[range.start * cols..range.end * cols];
            for (pair, n) in span.chunks_exact_mut(2).zip(&real.noise) {
                pair[0] = T::lit(n.re);
                pair[1] = T::lit(n.im);
            }
            gains.push(real.gain);
        }
        let out = match self.kind {
            ChannelKind::Awgn => g.add_const(x, &noise),
            ChannelKind::RayleighSlow => {
                let hs: Vec<(T, T)> = gains.iter().map(|h| split(h.expect("rayleigh gain"))).collect();
                let inv: Vec<(T, T)> = gains.iter().map(|h| split(1.0 / h.expect("rayleigh gain"))).collect();
                let faded = g.complex_gain(x, hs, frames.to_vec());
                let noisy = g.add_const(faded, &noise);
                g.complex_gain(noisy, inv, frames.to_vec())
            }
        };
        (out, TrainingDraw { snr_db, gains })
    }
}

fn split<T: Real>(z: Complex64) -> (T, T) {
    (T::lit(z.re), T::lit(z.im))
}
