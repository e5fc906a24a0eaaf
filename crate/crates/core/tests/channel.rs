use num_complex::{Complex32, Complex64};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sesc::channel::{propagate, transmit_symbols, ChannelConfig, ChannelKind, TrainingChannel};

fn unit_symbols(n: usize, rng: &mut ChaCha8Rng) -> Vec<Complex32> {
    (0..n)
        .map(|_| {
            let a: f32 = rng.random_range(0.0..std::f32::consts::TAU);
            Complex32::new(a.cos(), a.sin())
        })
        .collect()
}

fn c64(z: Complex32) -> Complex64 {
    Complex64::new(z.re as f64, z.im as f64)
}

/// Signal and noise energy before equalization over `frames` frames.
fn energies(kind: ChannelKind, snr_db: f64, frames: usize, len: usize) -> (f64, f64, usize) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (mut sig, mut noise) = (0.0, 0.0);
    for f in 0..frames {
        let x = unit_symbols(len, &mut rng);
        let p = propagate(&x, &ChannelConfig::new(kind, snr_db, 1000 + f as u64)).unwrap();
        let h = p.report.h.unwrap_or(Complex64::new(1.0, 0.0));
        for (y, &xi) in p.faded.iter().zip(&x) {
            sig += (h * c64(xi)).norm_sqr();
            noise += (y - h * c64(xi)).norm_sqr();
        }
    }
    (sig, noise, frames * len)
}

#[test]
fn awgn_snr_calibration() {
    let (sig, noise, n) = energies(ChannelKind::Awgn, 10.0, 100, 10_000);
    let snr = 10.0 * (sig / noise).log10();
    assert!((snr - 10.0).abs() <= 0.2, "measured {snr} dB");
    let noise_power = noise / n as f64;
    assert!((noise_power / 0.1 - 1.0).abs() < 0.01, "noise power {noise_power}");
}

#[test]
fn rayleigh_snr_calibration() {
    let (sig, noise, n) = energies(ChannelKind::RayleighSlow, 10.0, 10_000, 100);
    let snr = 10.0 * (sig / noise).log10();
    assert!((snr - 10.0).abs() <= 0.2, "measured {snr} dB");
    let noise_power = noise / n as f64;
    assert!((noise_power / 0.1 - 1.0).abs() < 0.01, "noise power {noise_power}");
}

#[test]
fn rayleigh_gain_statistics() {
    let x = [Complex32::new(1.0, 0.0)];
    let mut mags: Vec<f64> = (0..100_000)
        .map(|f| propagate(&x, &ChannelConfig::new(ChannelKind::RayleighSlow, 10.0, f)).unwrap().report.h.unwrap().norm())
        .collect();
    let mean_sq = mags.iter().map(|m| m * m).sum::<f64>() / mags.len() as f64;
    assert!((mean_sq - 1.0).abs() <= 0.02, "E|h|^2 = {mean_sq}");
    // |h| with E|h|^2 = 1 has CDF 1 - exp(-r^2).
    mags.sort_by(f64::total_cmp);
    let n = mags.len() as f64;
    let d = mags
        .iter()
        .enumerate()
        .map(|(i, &r)| {
            let cdf = 1.0 - (-r * r).exp();
            (cdf - i as f64 / n).abs().max((cdf - (i + 1) as f64 / n).abs())
        })
        .fold(0.0, f64::max);
    assert!(d < 1.63 / n.sqrt(), "KS distance {d}");
}

#[test]
fn rayleigh_conditional_error_variance() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let len = 8192;
    let mut checked = 0;
    for f in 0..200u64 {
        let x = unit_symbols(len, &mut rng);
        let cfg = ChannelConfig::new(ChannelKind::RayleighSlow, 10.0, f);
        let (y, report) = transmit_symbols(&x, &cfg).unwrap();
        let h = report.h.unwrap();
        if h.norm() <= 0.5 {
            continue;
        }
        let err = y.iter().zip(&x).map(|(a, b)| (c64(*a) - c64(*b)).norm_sqr()).sum::<f64>() / len as f64;
        let predicted = cfg.noise_variance() / h.norm_sqr();
        assert!((err / predicted - 1.0).abs() < 0.05, "frame {f}: {err} vs {predicted}");
        checked += 1;
    }
    assert!(checked > 100);
}

#[test]
fn training_snr_draws_are_uniform() {
    let ch = TrainingChannel::new(ChannelKind::RayleighSlow, 0.0, 20.0);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut draws: Vec<f64> = (0..10_000).map(|_| ch.draw_snr(&mut rng)).collect();
    draws.sort_by(f64::total_cmp);
    let n = draws.len() as f64;
    let d = draws
        .iter()
        .enumerate()
        .map(|(i, &s)| {
            let cdf = s / 20.0;
            (cdf - i as f64 / n).abs().max((cdf - (i + 1) as f64 / n).abs())
        })
        .fold(0.0, f64::max);
    // Critical value of the one-sample KS statistic at the 1% level.
    assert!(d < 1.628 / n.sqrt(), "KS distance {d}");
    assert!(draws[0] >= 0.0 && draws[draws.len() - 1] <= 20.0);
}

#[test]
fn noiseless_modes() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = unit_symbols(4096, &mut rng);
    let (y, _) = transmit_symbols(&x, &ChannelConfig::noiseless(ChannelKind::Awgn, 1)).unwrap();
    assert!(y.iter().zip(&x).all(|(a, b)| (c64(*a) - c64(*b)).norm() <= 1e-12));
    for seed in 0..50 {
        let p = propagate(&x, &ChannelConfig::noiseless(ChannelKind::RayleighSlow, seed)).unwrap();
        assert!(p.equalized.iter().zip(&x).all(|(a, b)| (a - c64(*b)).norm() <= 1e-9));
    }
}

#[test]
fn same_seed_same_output() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = unit_symbols(256, &mut rng);
    for kind in [ChannelKind::Awgn, ChannelKind::RayleighSlow] {
        let cfg = ChannelConfig::new(kind, 3.0, 77);
        assert_eq!(transmit_symbols(&x, &cfg).unwrap().0, transmit_symbols(&x, &cfg).unwrap().0);
        let other = ChannelConfig::new(kind, 3.0, 78);
        assert_ne!(transmit_symbols(&x, &cfg).unwrap().0, transmit_symbols(&x, &other).unwrap().0);
    }
}
