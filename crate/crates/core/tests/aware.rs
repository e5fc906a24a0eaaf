use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sesc::aware::{entropy_weights, rate_match, select_threshold, select_topk, CorpusStats, WeightVector};
use sesc::tensor::Tensor;
use sesc::FeatureSequence;

fn weights() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.0f64..=1.0, 1..64)
}

/// Weight vectors with frequent ties.
fn coarse_weights() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec((0u8..=10).prop_map(|k| k as f64 / 10.0), 1..64)
}

proptest! {
    #[test]
    fn threshold_is_monotone(w in weights(), a in 0.0f64..=1.0, b in 0.0f64..=1.0) {
        let w = WeightVector::new(w).unwrap();
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        let big = select_threshold(&w, lo).unwrap();
        let small = select_threshold(&w, hi).unwrap();
        prop_assert!(small.is_subset_of(&big));
        prop_assert!(small.popcount() >= 1);
    }

    #[test]
    fn threshold_keeps_exactly_qualifying(w in coarse_weights(), mu in 0.0f64..=1.0) {
        let wv = WeightVector::new(w.clone()).unwrap();
        let b = select_threshold(&wv, mu).unwrap();
        if w.iter().any(|&x| x >= mu) {
            for (i, &x) in w.iter().enumerate() {
                prop_assert_eq!(b.get(i), x >= mu);
            }
        } else {
            prop_assert_eq!(b.kept(), vec![wv.argmax()]);
        }
    }

    #[test]
    fn topk_matches_sort_oracle(w in coarse_weights(), k_frac in 0.0f64..1.0) {
        let k = 1 + (k_frac * w.len() as f64) as usize;
        let k = k.min(w.len());
        let b = select_topk(&WeightVector::new(w.clone()).unwrap(), k).unwrap();
        prop_assert_eq!(b.popcount(), k);
        // Oracle: stable sort by descending weight keeps lower indices first.
        let mut idx: Vec<usize> = (0..w.len()).collect();
        idx.sort_by(|&a, &c| w[c].partial_cmp(&w[a]).unwrap());
        let mut want: Vec<usize> = idx[..k].to_vec();
        want.sort();
        prop_assert_eq!(b.kept(), want);
    }

    #[test]
    fn topk_invariant_under_increasing_transform(raw in prop::collection::vec(-5.0f64..5.0, 2..40)) {
        let a = WeightVector::normalized(&raw).unwrap();
        let t: Vec<f64> = raw.iter().map(|x| x.exp() * 3.0 + x.powi(3)).collect();
        let b = WeightVector::normalized(&t).unwrap();
        for k in 1..=raw.len() {
            prop_assert_eq!(select_topk(&a, k).unwrap(), select_topk(&b, k).unwrap());
        }
    }

    #[test]
    fn normalized_weights_in_unit_range(raw in prop::collection::vec(-1e3f64..1e3, 1..64)) {
        let w = WeightVector::normalized(&raw).unwrap();
        prop_assert_eq!(w.len(), raw.len());
        prop_assert!(w.as_slice().iter().all(|x| (0.0..=1.0).contains(x)));
    }

    #[test]
    fn rate_match_fits_budget(w in weights(), c in 1usize..40, budget_frac in 0.0f64..1.2) {
        let wv = WeightVector::new(w.clone()).unwrap();
        let budget = c + (budget_frac * (w.len() * c) as f64) as usize;
        let r = rate_match(&wv, budget, c, 0.2, 0.05).unwrap();
        prop_assert!(r.bitmap.popcount() * c <= budget);
        prop_assert!(r.bitmap.popcount() >= 1);
    }

    /// Doubling the step visits a subset of the thresholds, so it can only
    /// stop at a threshold at least as high.
    #[test]
    fn coarser_step_sends_no_more(w in weights(), c in 1usize..8, budget_frac in 0.0f64..1.0, k in 1u32..6) {
        let wv = WeightVector::new(w.clone()).unwrap();
        let budget = c + (budget_frac * (w.len() * c) as f64) as usize;
        let fine = rate_match(&wv, budget, c, 0.2, 0.01 * k as f64).unwrap();
        let coarse = rate_match(&wv, budget, c, 0.2, 0.02 * k as f64).unwrap();
        prop_assert!(coarse.bitmap.popcount() <= fine.bitmap.popcount());
    }
}

#[test]
fn rate_match_examples() {
    let w = WeightVector::new((1..=8).map(|i| i as f64 / 10.0).collect()).unwrap();
    let r = rate_match(&w, 96, 32, 0.2, 0.1).unwrap();
    assert_eq!((r.mu, r.bitmap.popcount()), (0.6, 3));
    let r = rate_match(&w, 8 * 32, 32, 0.2, 0.1).unwrap();
    assert_eq!((r.mu, r.steps), (0.2, 0));
}

#[test]
fn threshold_boundaries() {
    let w = WeightVector::new(vec![0.1, 0.9, 0.3, 0.6]).unwrap();
    assert_eq!(select_threshold(&w, 0.0).unwrap().popcount(), 4);
    assert_eq!(select_threshold(&w, 0.5).unwrap().to_string(), "0101");
    let w = WeightVector::new(vec![0.3, 0.2, 0.1, 1.0, 0.5]).unwrap();
    assert_eq!(select_threshold(&w, 1.0).unwrap().kept(), vec![3]);
    assert_eq!(select_topk(&w, 5).unwrap().popcount(), 5);
}

fn random_sequence(rng: &mut ChaCha8Rng, l: usize, d: usize) -> FeatureSequence {
    FeatureSequence::new(Tensor::from_fn(l, d, |_, k| rng.random_range(-1.0f32..1.0) * (1.0 + k as f32))).unwrap()
}

#[test]
fn corpus_mean_feature_gets_zero_weight() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let corpus: Vec<FeatureSequence> = (0..50).map(|_| random_sequence(&mut rng, 16, 8)).collect();
    let stats = CorpusStats::estimate(&corpus, "test").unwrap();
    for trial in 0..20 {
        let mut f = random_sequence(&mut rng, 16, 8).features().clone();
        let slot = trial % 16;
        for (k, m) in stats.mean.iter().enumerate() {
            f.set(slot, k, *m as f32);
        }
        let w = entropy_weights(&FeatureSequence::new(f).unwrap(), &stats).unwrap();
        assert_eq!(w.as_slice()[slot], 0.0, "trial {trial}");
    }
}

#[test]
fn identical_features_give_half() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let corpus: Vec<FeatureSequence> = (0..10).map(|_| random_sequence(&mut rng, 8, 4)).collect();
    let stats = CorpusStats::estimate(&corpus, "x").unwrap();
    let same = FeatureSequence::new(Tensor::from_fn(8, 4, |_, k| k as f32 * 0.1)).unwrap();
    let w = entropy_weights(&same, &stats).unwrap();
    assert!(w.as_slice().iter().all(|&x| x == 0.5));
}

#[test]
fn normalization_ignores_affine_rescaling() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let raw: Vec<f64> = (0..30).map(|_| rng.random_range(-10.0..10.0)).collect();
    let a = WeightVector::normalized(&raw).unwrap();
    let scaled: Vec<f64> = raw.iter().map(|x| 4.0 * x + 7.0).collect();
    let b = WeightVector::normalized(&scaled).unwrap();
    for (x, y) in a.as_slice().iter().zip(b.as_slice()) {
        assert!((x - y).abs() < 1e-12);
    }
}
