use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sesc::baseline::{
    baseline_transmit, coded_symbol_count, hamming74_decode, hamming74_encode, transform_decode, transform_encode, BaselineConfig, Bitstream,
};
use sesc::channel::{ChannelConfig, ChannelKind};
use sesc::codec::Image;
use sesc::tasks::generate_range;

fn corpus(n: usize) -> Vec<Image> {
    generate_range(5, 0, n).into_iter().map(|s| s.image).collect()
}

fn quality(q: f64) -> BaselineConfig {
    BaselineConfig { quality: q, ..BaselineConfig::default() }
}

#[test]
fn hamming_corrects_every_single_error() {
    let mut cases = 0;
    for word in 0u8..16 {
        let data: Vec<bool> = (0..4).map(|i| word >> (3 - i) & 1 == 1).collect();
        let code = hamming74_encode(&data);
        assert_eq!(hamming74_decode(&code), data);
        for flip in 0..7 {
            let mut bad = code.clone();
            bad[flip] = !bad[flip];
            assert_eq!(hamming74_decode(&bad), data, "word {word} flip {flip}");
            cases += 1;
        }
    }
    assert_eq!(cases, 112);
}

#[test]
fn hamming_round_trip_and_double_errors() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let bits: Vec<bool> = (0..4000).map(|_| rng.random()).collect();
    assert_eq!(hamming74_decode(&hamming74_encode(&bits)), bits);
    // Two errors in a block exceed the correction radius.
    let data = vec![true, false, true, true];
    let mut code = hamming74_encode(&data);
    code[0] = !code[0];
    code[4] = !code[4];
    assert_ne!(hamming74_decode(&code), data);
}

#[test]
fn rate_falls_as_step_grows() {
    let imgs = corpus(20);
    let grid = [0.5, 1.0, 2.0, 4.0, 8.0, 16.0];
    for img in &imgs {
        let lens: Vec<usize> = grid.iter().map(|&q| transform_encode(img, &quality(q)).unwrap().len()).collect();
        assert!(lens.windows(2).all(|w| w[1] <= w[0]), "{lens:?}");
    }
}

#[test]
fn fidelity_at_fine_quantization() {
    let imgs = corpus(50);
    let grid = [1.0, 2.0, 4.0, 8.0, 16.0];
    let mut mean_psnr = Vec::new();
    for &q in &grid {
        let cfg = quality(q);
        let total: f64 = imgs
            .iter()
            .map(|img| {
                let bs = transform_encode(img, &cfg).unwrap();
                transform_decode(&bs, &cfg, 32, 32).unwrap().unwrap().psnr(img)
            })
            .sum();
        mean_psnr.push(total / imgs.len() as f64);
    }
    assert!(mean_psnr[0] >= 30.0, "{mean_psnr:?}");
    assert!(mean_psnr.windows(2).all(|w| w[1] < w[0]), "{mean_psnr:?}");
}

#[test]
fn early_bit_flip_breaks_the_image() {
    // One flipped bit near the start of the variable length code desynchronizes
    // everything after it.
    let cfg = BaselineConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (mut failed, mut degraded, mut intact) = (0, 0, 0);
    let imgs = corpus(100);
    for img in &imgs {
        let bs = transform_encode(img, &cfg).unwrap();
        let clean = transform_decode(&bs, &cfg, 32, 32).unwrap().unwrap().psnr(img);
        let mut bits = bs.bits().to_vec();
        let i = rng.random_range(0..bits.len() / 10);
        bits[i] = !bits[i];
        match transform_decode(&Bitstream::new(bits), &cfg, 32, 32).unwrap() {
            Err(_) => failed += 1,
            Ok(out) if clean - out.psnr(img) > 10.0 => degraded += 1,
            Ok(_) => intact += 1,
        }
    }
    println!("failed {failed}, degraded by more than 10 dB {degraded}, intact {intact}");
    assert!(2 * (failed + degraded) > imgs.len(), "failed {failed}, degraded {degraded}, intact {intact}");
}

#[test]
fn deep_fades_fail_more_often() {
    let cfg = BaselineConfig::default();
    let imgs = corpus(200);
    let failures = |snr: f64| {
        imgs.iter()
            .enumerate()
            .filter(|(i, img)| {
                let ch = ChannelConfig::new(ChannelKind::RayleighSlow, snr, *i as u64);
                baseline_transmit(img, &cfg, &ch).unwrap().failure.is_some()
            })
            .count()
    };
    let (low, high) = (failures(0.0), failures(15.0));
    assert!(low > high, "0 dB {low}, 15 dB {high}");
}

#[test]
fn symbol_count_and_noiseless_chain() {
    let cfg = BaselineConfig::default();
    for img in corpus(10) {
        let bs = transform_encode(&img, &cfg).unwrap();
        let want = transform_decode(&bs, &cfg, 32, 32).unwrap().unwrap();
        for kind in [ChannelKind::Awgn, ChannelKind::RayleighSlow] {
            let out = baseline_transmit(&img, &cfg, &ChannelConfig::noiseless(kind, 3)).unwrap();
            assert_eq!(out.symbols, (32 + bs.len()).div_ceil(4) * 7);
            assert_eq!(out.symbols, coded_symbol_count(32 + bs.len()));
            assert!(out.failure.is_none());
            assert_eq!(out.image, want);
        }
    }
}

#[test]
fn chain_is_deterministic() {
    let cfg = BaselineConfig::default();
    let img = &corpus(1)[0];
    let ch = ChannelConfig::new(ChannelKind::Awgn, 4.0, 9);
    assert_eq!(baseline_transmit(img, &cfg, &ch).unwrap(), baseline_transmit(img, &cfg, &ch).unwrap());
}
