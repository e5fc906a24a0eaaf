//! Acceptance checks with their measured values.
//!
//! Each check returns a [`Criterion`] rather than panicking, so the same code
//! feeds the report summary and the acceptance test.

use std::path::Path;

use num_complex::Complex32;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use sesc::autograd::Graph;
use sesc::aware::task_weights;
use sesc::baseline::{hamming74_decode, hamming74_encode};
use sesc::channel::{propagate, ChannelConfig, ChannelKind};
use sesc::codec::{features_to_symbols, Image, SymbolFrame};
use sesc::framing::{deserialize, serialize};
use sesc::tasks::{find_l_opt, spearman, task_metric, LabeledImage, TaskModel};
use sesc::tensor::Tensor;
use sesc::{CodecConfig, CodecModel, MaskBitmap};

use crate::sweeps::{mean_curve, EvalContext, SweepRow};
use crate::HarnessError;

#[derive(Clone, Debug, PartialEq)]
pub struct Criterion {
    pub id: u8,
    pub name: &'static str,
    pub measured: String,
    pub pass: bool,
}

impl std::fmt::Display for Criterion {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "[{}] {}. {}: {}", if self.pass { "PASS" } else { "FAIL" }, self.id, self.name, self.measured)
    }
}

/// Similarity rises with the number of sent features and saturates early.
pub fn l_sweep_shape(rows: &[SweepRow], l_tot: usize, eps: f64) -> Result<Criterion, HarnessError> {
    let curve = mean_curve(rows, |r| r.sent.unwrap_or(0) as f64, |r| r.similarity);
    let xs: Vec<f64> = curve.iter().map(|p| p.0).collect();
    let ys: Vec<f64> = curve.iter().map(|p| p.1).collect();
    let rho = spearman(&xs, &ys).unwrap_or(f64::NAN);
    let pts: Vec<(usize, f64)> = curve.iter().map(|&(x, y)| (x as usize, y)).collect();
    let l_opt = find_l_opt(&pts, eps)?;
    let limit = 0.9 * l_tot as f64;
    Ok(Criterion {
        id: 1,
        name: "similarity vs sent features",
        measured: format!(
            "spearman {rho:.4} (need >= 0.9), L_opt {l_opt} of {l_tot} (need <= {limit:.1}), similarity {:.4}..{:.4}",
            ys.first().copied().unwrap_or(f64::NAN),
            ys.last().copied().unwrap_or(f64::NAN)
        ),
        pass: rho >= 0.9 && (l_opt as f64) <= limit,
    })
}

fn mean_at(rows: &[SweepRow], pred: impl Fn(&SweepRow) -> bool, field: impl Fn(&SweepRow) -> f64) -> Option<f64> {
    let vals: Vec<f64> = rows.iter().filter(|r| pred(r)).map(field).collect();
    (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
}

/// The smallest nonzero threshold of the SNR sweep whose mean sent count at
/// `snr_db` is at most half the sequence.
pub fn half_rate_mu(rows: &[SweepRow], snr_db: f64, l_tot: usize) -> Option<f64> {
    let mut mus: Vec<f64> = rows.iter().filter_map(|r| r.mu).filter(|&m| m > 0.0).collect();
    mus.sort_by(f64::total_cmp);
    mus.dedup();
    mus.into_iter()
        .find(|&mu| mean_at(rows, |r| r.mu == Some(mu) && r.snr_db == snr_db, |r| r.n_mean).is_some_and(|n| n <= 0.5 * l_tot as f64))
}

/// At high SNR, half-rate selection stays within 3 points of full transmission.
pub fn closeness(rows: &[SweepRow], snr_db: f64, l_tot: usize) -> Criterion {
    let name = "half-rate accuracy close to full transmission";
    let Some(mu) = half_rate_mu(rows, snr_db, l_tot) else {
        return Criterion {
            id: 2,
            name,
            measured: format!("no threshold sends <= {} features at {snr_db} dB", l_tot / 2),
            pass: false,
        };
    };
    let at = |m: f64| mean_at(rows, |r| r.mu == Some(m) && r.snr_db == snr_db, |r| r.accuracy);
    let n = mean_at(rows, |r| r.mu == Some(mu) && r.snr_db == snr_db, |r| r.n_mean).unwrap();
    match (at(mu), at(0.0)) {
        (Some(sel), Some(full)) => Criterion {
            id: 2,
            name,
            measured: format!(
                "mu {mu}: n {n:.1}, accuracy {:.2}% vs full {:.2}% (gap {:.2} points, need <= 3)",
                100.0 * sel,
                100.0 * full,
                100.0 * (full - sel)
            ),
            pass: full - sel <= 0.03,
        },
        _ => Criterion {
            id: 2,
            name,
            measured: "missing full-transmission rows".into(),
            pass: false,
        },
    }
}

/// At low SNR, half-rate selection beats the reference codec by 20 points.
pub fn low_snr_separation(rows: &[SweepRow], low_snr_db: f64, high_snr_db: f64, l_tot: usize) -> Criterion {
    let name = "low-SNR margin over reference codec";
    let mu = half_rate_mu(rows, high_snr_db, l_tot);
    let sel = mu.and_then(|mu| mean_at(rows, |r| r.mu == Some(mu) && r.snr_db == low_snr_db, |r| r.accuracy));
    let base = mean_at(rows, |r| r.scheme == "baseline" && r.snr_db == low_snr_db, |r| r.accuracy);
    match (mu, sel, base) {
        (Some(mu), Some(s), Some(b)) => Criterion {
            id: 3,
            name,
            measured: format!(
                "{low_snr_db} dB, mu {mu}: accuracy {:.2}% vs reference {:.2}% (margin {:.2} points, need >= 20)",
                100.0 * s,
                100.0 * b,
                100.0 * (s - b)
            ),
            pass: s - b >= 0.20,
        },
        _ => Criterion {
            id: 3,
            name,
            measured: format!("missing rows at {low_snr_db} dB"),
            pass: false,
        },
    }
}

/// Best threshold pair by savings with at most `max_loss` accuracy loss:
/// `(mu_lo, mu_hi, savings, loss)`.
pub fn best_trade(rows: &[SweepRow], max_loss: f64) -> Option<(f64, f64, f64, f64)> {
    let sym = mean_curve(rows, |r| r.mu.unwrap_or(f64::NAN), |r| r.symbols_payload);
    let acc = mean_curve(rows, |r| r.mu.unwrap_or(f64::NAN), |r| r.accuracy);
    let mut best: Option<(f64, f64, f64, f64)> = None;
    for i in 0..sym.len() {
        for j in i + 1..sym.len() {
            if sym[i].1 <= 0.0 {
                continue;
            }
            let savings = 1.0 - sym[j].1 / sym[i].1;
            let loss = acc[i].1 - acc[j].1;
            if loss <= max_loss && best.is_none_or(|b| savings > b.2) {
                best = Some((sym[i].0, sym[j].0, savings, loss));
            }
        }
    }
    best
}

/// Symbol use falls monotonically with the threshold and some step trades
/// at least 15% of the symbols for at most 15 points.
pub fn mu_trade(rows: &[SweepRow], violation: Option<(usize, f64)>) -> Criterion {
    let trade = best_trade(rows, 0.15);
    let mono = match violation {
        None => "per-image counts non-increasing".to_string(),
        Some((i, mu)) => format!("image {i} sends more at mu {mu}"),
    };
    let measured = match trade {
        Some((a, b, s, l)) => format!("{mono}; mu {a} -> {b}: saves {:.1}% symbols for {:.2} points", 100.0 * s, 100.0 * l),
        None => format!("{mono}; no pair within 15 points"),
    };
    Criterion {
        id: 4,
        name: "threshold trade-off",
        measured,
        pass: violation.is_none() && trade.is_some_and(|t| t.2 >= 0.15),
    }
}

/// Mean task weight over object patches and over background patches, and
/// their difference.
pub fn selectivity_margin(task: &TaskModel, data: &[LabeledImage], patch_size: usize) -> Result<(f64, f64, f64), HarnessError> {
    let (mut obj, mut no, mut bg, mut nb) = (0.0, 0usize, 0.0, 0usize);
    for d in data {
        let w = task_weights(&d.image, task, patch_size)?;
        for (&is_obj, &wi) in d.object_patches(patch_size).iter().zip(w.as_slice()) {
            if is_obj {
                obj += wi;
                no += 1;
            } else {
                bg += wi;
                nb += 1;
            }
        }
    }
    let (o, b) = (obj / no.max(1) as f64, bg / nb.max(1) as f64);
    Ok((o, b, o - b))
}

pub fn selectivity(task: &TaskModel, data: &[LabeledImage], patch_size: usize) -> Result<Criterion, HarnessError> {
    let (o, b, m) = selectivity_margin(task, data, patch_size)?;
    Ok(Criterion {
        id: 5,
        name: "weights favour object patches",
        measured: format!("{} images: object {o:.4}, background {b:.4}, margin {m:.4}", data.len()),
        pass: data.len() >= 200 && m > 0.0,
    })
}

/// Largest deviation from unit power over `frames` random frames.
pub fn power_normalization_error(frames: usize, seed: u64) -> Result<f64, HarnessError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..frames {
        let l = rng.random_range(1..=64usize);
        let bits: Vec<bool> = (0..l).map(|_| rng.random_bool(0.5)).collect();
        let bitmap = if bits.iter().any(|&b| b) { MaskBitmap::new(bits)? } else { MaskBitmap::all_ones(l) };
        let d = 2 * rng.random_range(1..=32usize);
        let amp: f32 = 10f32.powf(rng.random_range(-3.0..3.0));
        let kept = Tensor::from_fn(bitmap.popcount(), d, |_, _| amp * rng.sample::<f32, _>(StandardNormal));
        let frame = features_to_symbols(&kept, &bitmap)?;
        worst = worst.max((frame.mean_power() - 1.0).abs());
    }
    Ok(worst)
}

/// Measured SNR in dB over `total` unit-power symbols split into frames of
/// `frame_len`; for fading channels the signal term is `|h x|^2`.
pub fn measured_snr_db(kind: ChannelKind, snr_db: f64, total: usize, frame_len: usize, seed: u64) -> Result<f64, HarnessError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut sig, mut noise) = (0.0, 0.0);
    for f in 0..total / frame_len {
        let x: Vec<Complex32> = (0..frame_len)
            .map(|_| {
                let a: f32 = rng.random_range(0.0..std::f32::consts::TAU);
                Complex32::new(a.cos(), a.sin())
            })
            .collect();
        let p = propagate(&x, &ChannelConfig::new(kind, snr_db, sesc::derive_seed(seed, f as u64)))?;
        let h = p.report.h.unwrap_or(num_complex::Complex64::new(1.0, 0.0));
        for (y, xi) in p.faded.iter().zip(&x) {
            let hx = h * num_complex::Complex64::new(xi.re as f64, xi.im as f64);
            sig += hx.norm_sqr();
            noise += (y - hx).norm_sqr();
        }
    }
    Ok(10.0 * (sig / noise).log10())
}

/// Mean `|h|^2` over `frames` independent fading blocks.
pub fn mean_gain(frames: usize, seed: u64) -> Result<f64, HarnessError> {
    let x = [Complex32::new(1.0, 0.0)];
    let mut sum = 0.0;
    for f in 0..frames {
        let p = propagate(&x, &ChannelConfig::new(ChannelKind::RayleighSlow, 10.0, sesc::derive_seed(seed, f as u64)))?;
        sum += p.report.h.map_or(1.0, |h| h.norm_sqr());
    }
    Ok(sum / frames as f64)
}

pub fn physical_layer(seed: u64) -> Result<Criterion, HarnessError> {
    let power = power_normalization_error(10_000, seed)?;
    let awgn = measured_snr_db(ChannelKind::Awgn, 10.0, 1_000_000, 1000, seed ^ 1)?;
    let ray = measured_snr_db(ChannelKind::RayleighSlow, 10.0, 1_000_000, 100, seed ^ 2)?;
    let gain = mean_gain(100_000, seed ^ 3)?;
    Ok(Criterion {
        id: 6,
        name: "physical-layer calibration",
        measured: format!(
            "power error {power:.2e} (<= 1e-6); SNR at 10 dB: awgn {awgn:.3}, rayleigh {ray:.3} (+-0.2); E|h|^2 {gain:.4} (1 +- 0.02)"
        ),
        pass: power <= 1e-6 && (awgn - 10.0).abs() <= 0.2 && (ray - 10.0).abs() <= 0.2 && (gain - 1.0).abs() <= 0.02,
    })
}

/// Single-error cases the Hamming decoder fixes, out of 112.
pub fn hamming_single_errors() -> usize {
    let mut ok = 0;
    for word in 0..16u8 {
        let data: Vec<bool> = (0..4).map(|i| word >> (3 - i) & 1 == 1).collect();
        let code = hamming74_encode(&data);
        for pos in 0..7 {
            let mut bad = code.clone();
            bad[pos] = !bad[pos];
            ok += (hamming74_decode(&bad) == data) as usize;
        }
    }
    ok
}

fn random_frame(rng: &mut ChaCha8Rng) -> Result<SymbolFrame, HarnessError> {
    let l = rng.random_range(1..=80usize);
    let mut bits: Vec<bool> = (0..l).map(|_| rng.random_bool(0.4)).collect();
    let first = rng.random_range(0..l);
    bits[first] = true;
    let bitmap = MaskBitmap::new(bits)?;
    let c = rng.random_range(1..=4usize);
    let symbols = (0..bitmap.popcount() * c)
        .map(|_| Complex32::new(rng.sample(StandardNormal), rng.sample(StandardNormal)))
        .collect();
    Ok(SymbolFrame::new(symbols, bitmap, c, Some(rng.random_range(0.01f32..100.0)))?)
}

/// Returns the number of mutated inputs that panicked or that parsed but did
/// not re-serialize to the same bytes, plus the number of clean round-trip
/// failures.
pub fn framing_fuzz(mutations: usize, seed: u64) -> Result<(usize, usize), HarnessError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut bad_mutations, mut bad_round_trips) = (0, 0);
    for _ in 0..mutations {
        let frame = random_frame(&mut rng)?;
        let bytes = serialize(&frame).map_err(sesc::Error::from)?;
        if deserialize(&bytes).as_ref() != Ok(&frame) {
            bad_round_trips += 1;
        }
        let mut m = bytes.clone();
        match rng.random_range(0..4) {
            0 => {
                let i = rng.random_range(0..m.len());
                m[i] ^= 1 << rng.random_range(0..8);
            }
            1 => m.truncate(rng.random_range(0..m.len())),
            2 => m.extend((0..rng.random_range(1..8)).map(|_| rng.random::<u8>())),
            _ => {
                let i = rng.random_range(0..m.len());
                m[i] = rng.random();
            }
        }
        match std::panic::catch_unwind(|| deserialize(&m)) {
            Err(_) => bad_mutations += 1,
            Ok(Ok(f)) => {
                if serialize(&f).ok().as_deref() != Some(&m[..]) {
                    bad_mutations += 1;
                }
            }
            Ok(Err(_)) => {}
        }
    }
    Ok((bad_mutations, bad_round_trips))
}

/// Bitmaps (over every `l <= 8`) where mask-token refill disagrees with a
/// direct placement oracle.
pub fn placement_mismatches() -> Result<usize, HarnessError> {
    let mut mismatches = 0;
    for l in 1..=8usize {
        let cfg = CodecConfig {
            image_height: 4,
            image_width: 4 * l,
            patch_size: 4,
            dim: 8,
            encoder_depth: 1,
            decoder_depth: 1,
            heads: 2,
            mlp_hidden: 8,
        };
        let model = CodecModel::<f32>::initialized(cfg, l as u64)?;
        let token = model.mask_token()?.data().to_vec();
        for mask in 1u32..(1 << l) {
            let bits: Vec<bool> = (0..l).map(|i| mask >> i & 1 == 1).collect();
            let bitmap = MaskBitmap::new(bits.clone())?;
            let n = bitmap.popcount();
            let received = Tensor::from_fn(n, cfg.dim, |r, c| (100 * r + c) as f32);
            let seq = model.reconstruct_sequence(&received, &bitmap)?;
            let mut next = 0;
            for (i, &b) in bits.iter().enumerate() {
                let want: Vec<f32> = if b {
                    next += 1;
                    received.row(next - 1).to_vec()
                } else {
                    token.clone()
                };
                if seq.row(i) != &want[..] {
                    mismatches += 1;
                    break;
                }
            }
        }
    }
    Ok(mismatches)
}

pub fn oracles(seed: u64) -> Result<Criterion, HarnessError> {
    let hamming = hamming_single_errors();
    let (fuzz_bad, trip_bad) = framing_fuzz(10_000, seed)?;
    let placement = placement_mismatches()?;
    Ok(Criterion {
        id: 7,
        name: "small-scale oracles",
        measured: format!(
            "hamming {hamming}/112 corrected; fuzz: {fuzz_bad} untyped outcomes, {trip_bad} round-trip failures in 10000; placement mismatches {placement}"
        ),
        pass: hamming == 112 && fuzz_bad == 0 && trip_bad == 0 && placement == 0,
    })
}

/// Largest relative gradient error (per parameter tensor) of a two-patch
/// codec against central differences.
pub fn toy_gradient_error(seed: u64) -> Result<f64, HarnessError> {
    let cfg = CodecConfig {
        image_height: 4,
        image_width: 8,
        patch_size: 4,
        dim: 4,
        encoder_depth: 1,
        decoder_depth: 1,
        heads: 1,
        mlp_hidden: 8,
    };
    let model = CodecModel::<f32>::initialized(cfg, seed)?.cast::<f64>();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let patches = Tensor::<f64>::from_fn(2, cfg.patch_dim(), |_, _| rng.random_range(0.0..1.0));
    let bitmaps = [MaskBitmap::new(vec![true, false])?];
    let loss_of = |m: &CodecModel<f64>| -> Result<(f64, sesc::params::ParamGrads<f64>), HarnessError> {
        let mut g = Graph::new(m.params());
        let fwd = m.forward_train(&mut g, &patches, &bitmaps)?;
        let loss = g.mse(fwd.reconstruction, patches.clone());
        let v = g.value(loss).data()[0];
        Ok((v, g.backward(loss).into_params()))
    };
    let grads = loss_of(&model)?.1;
    let h = 1e-6;
    let mut worst: f64 = 0.0;
    let ids: Vec<_> = model.params().ids().collect();
    for id in ids {
        let analytic: Vec<f64> = match grads.get(id) {
            Some(t) => t.data().to_vec(),
            None => vec![0.0; model.params().get(id).len()],
        };
        let mut numeric = Vec::with_capacity(analytic.len());
        for k in 0..analytic.len() {
            let mut plus = model.clone();
            plus.params_mut().get_mut(id).data_mut()[k] += h;
            let mut minus = model.clone();
            minus.params_mut().get_mut(id).data_mut()[k] -= h;
            numeric.push((loss_of(&plus)?.0 - loss_of(&minus)?.0) / (2.0 * h));
        }
        let diff = analytic.iter().zip(&numeric).map(|(a, n)| (a - n).powi(2)).sum::<f64>().sqrt();
        let scale = analytic.iter().map(|a| a * a).sum::<f64>().sqrt().max(numeric.iter().map(|n| n * n).sum::<f64>().sqrt());
        if scale > 1e-9 {
            worst = worst.max(diff / scale);
        }
    }
    Ok(worst)
}

/// Mean reconstruction MSE of full transmission over `data` at `snr_db`.
pub fn channel_mse(model: &CodecModel, data: &[LabeledImage], kind: ChannelKind, snr_db: f64, seed: u64) -> Result<f64, HarnessError> {
    let weights = vec![sesc::aware::WeightVector::new(vec![1.0; model.config().seq_len()])?; data.len()];
    let task = TaskModel::new(model.config().image_height, model.config().image_width, 0)?;
    let ctx = EvalContext::new(model, model, &task, data, weights, seed)?;
    let subset: Vec<usize> = (0..data.len()).collect();
    let bitmaps = vec![MaskBitmap::all_ones(ctx.l_total()); data.len()];
    let recon = ctx.transmit(&subset, &bitmaps, kind, snr_db, crate::sweeps::STREAM_SNR, 0)?;
    Ok(recon.iter().zip(data).map(|(r, d)| r.mse(&d.image)).sum::<f64>() / data.len() as f64)
}

pub struct TrainingEvidence<'a> {
    pub pretrained: &'a CodecModel,
    pub finetuned: &'a CodecModel,
    pub task: &'a TaskModel,
    pub eval: &'a [LabeledImage],
    pub channel: ChannelKind,
    pub seed: u64,
}

pub fn training_sanity(ev: &TrainingEvidence<'_>) -> Result<Criterion, HarnessError> {
    let pre = channel_mse(ev.pretrained, ev.eval, ev.channel, 5.0, ev.seed)?;
    let fine = channel_mse(ev.finetuned, ev.eval, ev.channel, 5.0, ev.seed)?;
    let grad = toy_gradient_error(ev.seed)?;
    let imgs: Vec<&Image> = ev.eval.iter().map(|d| &d.image).collect();
    let labels: Vec<usize> = ev.eval.iter().map(|d| d.label).collect();
    let acc = task_metric(ev.task, &imgs, &labels)?;
    Ok(Criterion {
        id: 8,
        name: "training sanity",
        measured: format!(
            "MSE at 5 dB: fine-tuned {fine:.5} vs pretrained {pre:.5}; toy gradient error {grad:.2e} (< 1e-3); clean task accuracy {:.2}% (>= 95)",
            100.0 * acc
        ),
        pass: fine < pre && grad < 1e-3 && acc >= 0.95,
    })
}

/// Names of CSV files that differ between two output directories.
pub fn csv_differences(a: &Path, b: &Path, names: &[&str]) -> Result<Vec<String>, HarnessError> {
    let mut out = Vec::new();
    for name in names {
        let read = |dir: &Path| std::fs::read(dir.join(name)).map_err(|e| HarnessError::Io(dir.join(name).display().to_string(), e));
        if read(a)? != read(b)? {
            out.push((*name).to_string());
        }
    }
    Ok(out)
}

pub fn determinism(a: &Path, b: &Path, names: &[&str]) -> Result<Criterion, HarnessError> {
    let diff = csv_differences(a, b, names)?;
    Ok(Criterion {
        id: 9,
        name: "end-to-end determinism",
        measured: if diff.is_empty() {
            format!("{} CSV files identical across two runs", names.len())
        } else {
            format!("differing files: {}", diff.join(", "))
        },
        pass: diff.is_empty(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hamming_corrects_all_single_errors() {
        assert_eq!(hamming_single_errors(), 112);
    }

    #[test]
    fn placement_matches_oracle() {
        assert_eq!(placement_mismatches().unwrap(), 0);
    }

    #[test]
    fn trade_picks_largest_saving_within_loss() {
        let row = |mu: f64, sym: f64, acc: f64| SweepRow {
            scheme: "sesc".into(),
            channel: ChannelKind::Awgn,
            snr_db: 15.0,
            mu: Some(mu),
            sent: None,
            replicate: 0,
            seed: 0,
            images: 1,
            n_mean: sym,
            symbols_payload: sym,
            symbols_with_overhead: sym,
            accuracy: acc,
            similarity: f64::NAN,
            mse: 0.0,
            failure_rate: 0.0,
        };
        let rows = vec![row(0.0, 100.0, 0.9), row(0.5, 80.0, 0.85), row(0.9, 10.0, 0.3)];
        let (a, b, s, l) = best_trade(&rows, 0.15).unwrap();
        assert_eq!((a, b), (0.0, 0.5));
        assert!((s - 0.2).abs() < 1e-12 && (l - 0.05).abs() < 1e-12);
    }
}
