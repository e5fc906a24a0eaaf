use num_complex::Complex32;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use sesc::autograd::Graph;
use sesc::channel::{transmit, ChannelConfig, ChannelKind};
use sesc::codec::{features_to_symbols, patchify, symbols_to_features, unpatchify, CodecConfig, CodecModel, Image, SymbolFrame};
use sesc::tensor::Tensor;
use sesc::MaskBitmap;

fn random_image(h: usize, w: usize, seed: u64) -> Image {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Image::from_fn(h, w, |_, _, _| rng.random())
}

fn toy_config(h: usize, w: usize, dim: usize) -> CodecConfig {
    CodecConfig {
        image_height: h,
        image_width: w,
        patch_size: 4,
        dim,
        encoder_depth: 1,
        decoder_depth: 1,
        heads: 1,
        mlp_hidden: 8,
    }
}

#[test]
fn default_geometry() {
    let p = patchify(&random_image(32, 32, 1), 4).unwrap();
    assert_eq!(p.len(), 64);
    assert_eq!(p.patches().cols(), 48);
    let cfg = CodecConfig::default();
    assert_eq!((cfg.seq_len(), cfg.patch_dim(), cfg.symbols_per_feature()), (64, 48, 32));
}

#[test]
fn zero_image_single_patch() {
    let p = patchify(&Image::filled(8, 8, 0.0), 8).unwrap();
    assert_eq!(p.len(), 1);
    assert_eq!(p.patches().data(), &[0.0; 192][..]);
}

#[test]
fn unpatchify_rejects_wrong_size() {
    let p = patchify(&random_image(16, 16, 2), 4).unwrap();
    assert!(unpatchify(&p, 16, 8).is_err());
    assert!(unpatchify(&p, 32, 32).is_err());
    assert!(patchify(&random_image(10, 16, 2), 4).is_err());
}

proptest! {
    #[test]
    fn patchify_round_trip(seed in any::<u64>(), gh in 1usize..5, gw in 1usize..5, ps in 1usize..5) {
        let img = random_image(gh * ps, gw * ps, seed);
        let p = patchify(&img, ps).unwrap();
        prop_assert_eq!(unpatchify(&p, gh * ps, gw * ps).unwrap(), img);
    }

    #[test]
    fn unit_power_for_any_frame(seed in any::<u64>(), n in 1usize..40, c in 1usize..40, amp in -6.0f64..6.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = 10f64.powf(amp) as f32;
        let kept = Tensor::from_fn(n, 2 * c, |_, _| s * rng.sample::<f32, _>(StandardNormal));
        let frame = features_to_symbols(&kept, &MaskBitmap::all_ones(n)).unwrap();
        prop_assert!((frame.mean_power() - 1.0).abs() <= 1e-6);
    }

    #[test]
    fn symbol_round_trip(seed in any::<u64>(), n in 1usize..20, c in 1usize..20) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let kept = Tensor::from_fn(n, 2 * c, |_, _| rng.random_range(-3.0f32..3.0));
        let frame = features_to_symbols(&kept, &MaskBitmap::all_ones(n)).unwrap();
        let back = symbols_to_features(&frame).unwrap();
        for (a, b) in back.data().iter().zip(kept.data()) {
            prop_assert!((a - b).abs() <= 1e-6 * b.abs().max(1.0));
        }
    }
}

#[test]
fn single_feature_normalization() {
    let mut v = vec![0.0f32; 64];
    v[0] = 2.0;
    let frame = features_to_symbols(&Tensor::from_vec(1, 64, v), &MaskBitmap::all_ones(1)).unwrap();
    let s = frame.symbols();
    assert_eq!(s.len(), 32);
    assert!((s[0].norm() - 32f32.sqrt()).abs() < 1e-5);
    assert!(s[1..].iter().all(|z| *z == Complex32::new(0.0, 0.0)));
    assert!((frame.mean_power() - 1.0).abs() < 1e-6);
}

#[test]
fn noiseless_channel_round_trip() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let kept = Tensor::from_fn(5, 8, |_, _| rng.random_range(-1.0f32..1.0));
    let bitmap = MaskBitmap::new(vec![true, false, true, true, false, true, true]).unwrap();
    for kind in [ChannelKind::Awgn, ChannelKind::RayleighSlow] {
        let frame = features_to_symbols(&kept, &bitmap).unwrap();
        let (rx, _) = transmit(&frame, &ChannelConfig::noiseless(kind, 9)).unwrap();
        let back = symbols_to_features(&rx).unwrap();
        for (a, b) in back.data().iter().zip(kept.data()) {
            assert!((a - b).abs() < 1e-6, "{kind}: {a} vs {b}");
        }
        assert_eq!(rx.bitmap(), &bitmap);
    }
}

#[test]
fn awgn_error_variance_after_descaling() {
    // Per complex element the error after removing the scale has variance
    // sigma^2 / scale^2.
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (n, d) = (100, 64);
    let (mut sum, mut count, mut predicted) = (0.0, 0usize, 0.0);
    for k in 0..32 {
        let kept = Tensor::from_fn(n, d, |_, _| rng.random_range(-2.0f32..2.0));
        let frame = features_to_symbols(&kept, &MaskBitmap::all_ones(n)).unwrap();
        let cfg = ChannelConfig::new(ChannelKind::Awgn, 10.0, k);
        let (rx, _) = transmit(&frame, &cfg).unwrap();
        let back = symbols_to_features(&rx).unwrap();
        let scale = frame.scale().unwrap() as f64;
        for (a, b) in back.data().chunks_exact(2).zip(kept.data().chunks_exact(2)) {
            sum += ((a[0] - b[0]) as f64).powi(2) + ((a[1] - b[1]) as f64).powi(2);
            count += 1;
        }
        predicted += cfg.noise_variance() / (scale * scale) * (n * d / 2) as f64;
    }
    assert!(count >= 100_000);
    let ratio = sum / predicted;
    assert!((ratio - 1.0).abs() < 0.05, "measured / predicted = {ratio}");
}

#[test]
fn reconstruct_sequence_cases() {
    let cfg = toy_config(4, 32, 8);
    let model = CodecModel::<f32>::initialized(cfg, 5).unwrap();
    let token = model.mask_token().unwrap().data().to_vec();
    let tagged = |n: usize| Tensor::from_fn(n, 8, |r, c| (10 * r + c) as f32 + 1.0);

    let all = model.reconstruct_sequence(&tagged(8), &MaskBitmap::all_ones(8)).unwrap();
    assert_eq!(all.features(), &tagged(8));

    let first = model.reconstruct_sequence(&tagged(1), &MaskBitmap::from_indices(8, &[0]).unwrap()).unwrap();
    assert_eq!(first.row(0), tagged(1).row(0));
    assert!((1..8).all(|i| first.row(i) == &token[..]));

    let alt = MaskBitmap::new((0..8).map(|i| i % 2 == 0).collect()).unwrap();
    let seq = model.reconstruct_sequence(&tagged(4), &alt).unwrap();
    for i in 0..8 {
        if i % 2 == 0 {
            assert_eq!(seq.row(i), tagged(4).row(i / 2));
        } else {
            assert_eq!(seq.row(i), &token[..]);
        }
    }
    assert!(model.reconstruct_sequence(&tagged(3), &alt).is_err());
}

#[test]
fn placement_brute_force_small_sequences() {
    for l in 1..=8usize {
        let model = CodecModel::<f32>::initialized(toy_config(4, 4 * l, 8), l as u64).unwrap();
        let token = model.mask_token().unwrap().data().to_vec();
        for mask in 1u32..(1 << l) {
            let bits: Vec<bool> = (0..l).map(|i| mask >> i & 1 == 1).collect();
            let bitmap = MaskBitmap::new(bits.clone()).unwrap();
            let n = bitmap.popcount();
            let received = Tensor::from_fn(n, 8, |r, c| (100 * r + c) as f32);
            let seq = model.reconstruct_sequence(&received, &bitmap).unwrap();
            let mut sent = received.data().chunks_exact(8);
            let mut tokens = 0;
            for (i, &b) in bits.iter().enumerate() {
                if b {
                    assert_eq!(seq.row(i), sent.next().unwrap(), "l {l} mask {mask:b} slot {i}");
                } else {
                    assert_eq!(seq.row(i), &token[..]);
                    tokens += 1;
                }
            }
            assert_eq!(tokens, l - n);
            assert!(sent.next().is_none());
        }
    }
}

#[test]
fn inference_is_deterministic() {
    let cfg = CodecConfig::default();
    let model = CodecModel::<f32>::initialized(cfg, 11).unwrap();
    let p = patchify(&random_image(32, 32, 12), 4).unwrap();
    let a = model.encode_features(&p).unwrap();
    let b = model.encode_features(&p).unwrap();
    assert_eq!(a.len(), 64);
    let bits = |f: &sesc::FeatureSequence| f.features().data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&a), bits(&b));
    let ia = model.decode_image(&a, 32, 32).unwrap();
    assert_eq!(ia, model.decode_image(&b, 32, 32).unwrap());
    assert!(ia.pixels().iter().all(|v| (0.0..=1.0).contains(v)));
}

#[test]
fn toy_codec_gradients_match_finite_differences() {
    // Two patches, d = 4, one sent and one replaced by the mask token.
    let cfg = toy_config(4, 8, 4);
    let model = CodecModel::<f32>::initialized(cfg, 21).unwrap().cast::<f64>();
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let patches = Tensor::<f64>::from_fn(2, cfg.patch_dim(), |_, _| rng.random_range(0.0..1.0));
    let bitmaps = [MaskBitmap::new(vec![true, false]).unwrap()];
    let loss = |m: &CodecModel<f64>| {
        let mut g = Graph::new(m.params());
        let fwd = m.forward_train(&mut g, &patches, &bitmaps).unwrap();
        let l = g.mse(fwd.reconstruction, patches.clone());
        (g.value(l).data()[0], g.backward(l).into_params())
    };
    let grads = loss(&model).1;
    let h = 1e-6;
    let ids: Vec<_> = model.params().ids().collect();
    let mut checked = 0;
    for id in ids {
        let name = model.params().name(id).to_owned();
        let analytic = grads.get(id).map(|t| t.data().to_vec()).unwrap_or_else(|| vec![0.0; model.params().get(id).len()]);
        let mut numeric = Vec::with_capacity(analytic.len());
        for k in 0..analytic.len() {
            let mut plus = model.clone();
            plus.params_mut().get_mut(id).data_mut()[k] += h;
            let mut minus = model.clone();
            minus.params_mut().get_mut(id).data_mut()[k] -= h;
            numeric.push((loss(&plus).0 - loss(&minus).0) / (2.0 * h));
        }
        let diff: f64 = analytic.iter().zip(&numeric).map(|(a, n)| (a - n).powi(2)).sum::<f64>().sqrt();
        let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
        let scale = norm(&analytic).max(norm(&numeric));
        if scale > 1e-9 {
            assert!(diff / scale < 1e-3, "{name}: relative error {}", diff / scale);
            checked += 1;
        }
    }
    assert!(checked > 10);
}

#[test]
fn frame_requires_consistent_sizes() {
    let bitmap = MaskBitmap::new(vec![true, false, true]).unwrap();
    assert!(SymbolFrame::new(vec![Complex32::new(1.0, 0.0); 3], bitmap.clone(), 2, Some(1.0)).is_err());
    assert!(SymbolFrame::new(vec![Complex32::new(1.0, 0.0); 4], bitmap, 2, Some(1.0)).is_ok());
}
