//! Properties of the trained models and of the sweep artifacts produced by
//! the shared pipeline run.

mod common;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sesc::tasks::{embedding, semantic_similarity, shuffle, spearman, task_metric, NUM_CLASSES};
use sesc::{patchify, Image, MaskBitmap};
use sesc_harness::pipeline::{self, read_csv, Layout, SWEEP_FILES};
use sesc_harness::sweeps::{mean_curve, SweepRow};
use sesc_harness::train::{random_bitmap, validation_mse, EpochRow};

fn rows(name: &str) -> Vec<SweepRow> {
    read_csv(&common::fixture().out.path(name)).unwrap()
}

fn images(n: usize) -> Vec<&'static Image> {
    common::fixture().trained.eval.iter().take(n).map(|d| &d.image).collect()
}

// Encoder and decoder.

#[test]
fn same_class_embeddings_are_closer() {
    let f = common::fixture();
    let data = &f.trained.eval;
    let emb: Vec<Vec<f64>> = data.iter().map(|d| embedding(&f.trained.pretrained, &d.image).unwrap()).collect();
    let (mut same, mut cross) = (Vec::new(), Vec::new());
    'outer: for i in 0..data.len() {
        for j in i + 1..data.len() {
            let bucket = if data[i].label == data[j].label { &mut same } else { &mut cross };
            if bucket.len() < 500 {
                bucket.push(sesc::tasks::cosine(&emb[i], &emb[j]).unwrap());
            }
            if same.len() == 500 && cross.len() == 500 {
                break 'outer;
            }
        }
    }
    assert!(same.len() >= 100);
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    assert!(mean(&same) > mean(&cross), "same {} cross {}", mean(&same), mean(&cross));
}

#[test]
fn similarity_is_symmetric_and_reflexive() {
    let f = common::fixture();
    let imgs = images(10);
    for w in imgs.windows(2) {
        let e = &f.trained.pretrained;
        assert!((semantic_similarity(e, w[0], w[0]).unwrap() - 1.0).abs() <= 1e-6);
        assert_eq!(semantic_similarity(e, w[0], w[1]).unwrap(), semantic_similarity(e, w[1], w[0]).unwrap());
    }
}

#[test]
fn noiseless_mse_matches_recorded_validation() {
    let f = common::fixture();
    for model in [&f.trained.pretrained, &f.trained.finetuned] {
        let recorded = model.meta.validation_mse.expect("recorded validation MSE");
        let measured = validation_mse(model, &f.trained.eval).unwrap();
        assert!(measured <= recorded * 1.1, "eval MSE {measured} vs recorded {recorded}");
    }
}

#[test]
fn masking_three_quarters_hurts() {
    let f = common::fixture();
    let m = &f.trained.finetuned;
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (mut full, mut masked) = (0.0, 0.0);
    let imgs = images(100);
    for img in &imgs {
        let seq = m.encode_features(&patchify(img, 4).unwrap()).unwrap();
        full += m.decode_image(&seq, 32, 32).unwrap().mse(img);
        let bitmap: MaskBitmap = random_bitmap(seq.len(), 0.75, &mut rng);
        let kept = seq.select(&bitmap).unwrap();
        let partial = m.reconstruct_sequence(&kept, &bitmap).unwrap();
        masked += m.decode_image(&partial, 32, 32).unwrap().mse(img);
    }
    assert!(masked > full, "masked {masked} vs full {full}");
}

// Task model.

#[test]
fn shuffled_labels_give_chance() {
    let f = common::fixture();
    let imgs = images(200);
    let mut labels: Vec<usize> = f.trained.eval.iter().take(200).map(|d| d.label).collect();
    assert!(task_metric(&f.trained.task, &imgs, &labels).unwrap() >= 0.95);
    shuffle(&mut labels, &mut ChaCha8Rng::seed_from_u64(5));
    let acc = task_metric(&f.trained.task, &imgs, &labels).unwrap();
    assert!((acc - 1.0 / NUM_CLASSES as f64).abs() <= 0.07, "accuracy {acc}");
}

#[test]
fn gray_failure_image_is_at_chance() {
    let f = common::fixture();
    let gray = Image::filled(32, 32, 0.5);
    let n = f.trained.eval.len();
    let labels: Vec<usize> = f.trained.eval.iter().map(|d| d.label).collect();
    let acc = task_metric(&f.trained.task, &vec![&gray; n], &labels).unwrap();
    println!("constant mid-gray input scores {acc:.3} against the evaluation labels");
    assert!(acc <= 0.2, "accuracy {acc}");
}

#[test]
fn task_inference_is_bit_stable() {
    let task = &common::fixture().trained.task;
    let imgs = images(5);
    let bits = |l: Vec<Vec<f32>>| l.into_iter().flatten().map(f32::to_bits).collect::<Vec<_>>();
    assert_eq!(bits(task.logits(&imgs).unwrap()), bits(task.logits(&imgs).unwrap()));
}

// Training.

#[test]
fn pretraining_halves_validation_error() {
    let curve: Vec<EpochRow> = read_csv(&common::fixture().out.path("pretrain_curve.csv")).unwrap();
    let (first, last) = (curve[0].val_mse, curve[curve.len() - 1].val_mse);
    assert!(last < 0.5 * first, "epoch 1 {first}, final {last}");
}

#[test]
fn fine_tuning_keeps_clean_quality_and_shape() {
    let f = common::fixture();
    let (p, t) = (&f.trained.pretrained, &f.trained.finetuned);
    let (mp, mt) = (p.meta.validation_mse.unwrap(), t.meta.validation_mse.unwrap());
    assert!(mt <= 1.2 * mp, "fine-tuned {mt} vs pretrained {mp}");
    assert_eq!(p.params().scalar_count(), t.params().scalar_count());
    let names = |m: &sesc::CodecModel| m.params().ids().map(|id| m.params().name(id).to_owned()).collect::<Vec<_>>();
    assert_eq!(names(p), names(t));
}

#[test]
fn unmasked_autoencoder_fits_at_least_as_well() {
    let mut cfg = common::reduced_config();
    cfg.data.train_count = 512;
    cfg.pretrain.epochs = 3;
    let mut mse = Vec::new();
    for ratio in [0.0, 0.75] {
        cfg.pretrain.mask_ratio = ratio;
        let dir = tempfile::tempdir().unwrap();
        let out = Layout::new(dir.path()).unwrap();
        let m = pipeline::pretrain(&cfg, &out, false).unwrap();
        mse.push(m.meta.validation_mse.unwrap());
    }
    assert!(mse[0] <= mse[1], "ratio 0: {}, ratio 0.75: {}", mse[0], mse[1]);
}

// Sweeps.

#[test]
fn sesc_accuracy_rises_with_snr() {
    let snr = rows("sweep_snr.csv");
    for mu in &common::fixture().cfg.sweeps.snr_sweep_mu {
        let sel: Vec<SweepRow> = snr.iter().filter(|r| r.scheme != "baseline" && r.mu == Some(*mu)).cloned().collect();
        let curve = mean_curve(&sel, |r| r.snr_db, |r| r.accuracy);
        let (x, y): (Vec<f64>, Vec<f64>) = curve.into_iter().unzip();
        let rho = spearman(&x, &y).unwrap_or(1.0);
        assert!(rho >= 0.8, "mu {mu}: spearman {rho}");
    }
}

#[test]
fn baseline_collapses_at_low_snr() {
    let base: Vec<SweepRow> = rows("sweep_snr.csv").into_iter().filter(|r| r.scheme == "baseline").collect();
    let curve = mean_curve(&base, |r| r.snr_db, |r| r.accuracy);
    let at = |s: f64| curve.iter().find(|p| p.0 == s).unwrap().1;
    assert!(at(0.0) < at(15.0), "0 dB {} vs 15 dB {}", at(0.0), at(15.0));
}

#[test]
fn full_rows_send_everything() {
    let l_tot = common::fixture().trained.finetuned.config().seq_len();
    for name in ["sweep_snr.csv", "sweep_mu.csv"] {
        let full: Vec<SweepRow> = rows(name).into_iter().filter(|r| r.scheme == "full").collect();
        assert!(!full.is_empty());
        assert!(full.iter().all(|r| r.n_mean == l_tot as f64 && r.symbols_payload == (l_tot * 32) as f64));
    }
}

#[test]
fn zero_threshold_row_equals_full_transmission() {
    let f = common::fixture();
    let snr_db = f.cfg.sweeps.mu_sweep_snr_db;
    let key = |r: &SweepRow| (r.replicate, r.accuracy.to_bits(), r.mse.to_bits(), r.n_mean.to_bits(), r.seed);
    let from_mu: Vec<_> = rows("sweep_mu.csv").iter().filter(|r| r.mu == Some(0.0)).map(key).collect();
    let from_snr: Vec<_> = rows("sweep_snr.csv").iter().filter(|r| r.scheme == "full" && r.snr_db == snr_db).map(key).collect();
    assert_eq!(from_mu.len(), f.cfg.sweeps.replicates);
    assert_eq!(from_mu, from_snr);
}

// Artifacts.

#[test]
fn interrupted_sweep_resumes_to_identical_csv() {
    let f = common::fixture();
    let dir = tempfile::tempdir().unwrap();
    let out = Layout::new(dir.path()).unwrap();
    let original = std::fs::read(f.out.path("sweep_mu.csv")).unwrap();
    let mut partial = rows("sweep_mu.csv");
    partial.truncate(partial.len() - 4);
    partial.remove(3);
    pipeline::write_csv(&out.path("sweep_mu.csv"), &partial).unwrap();
    let ctx = pipeline::context(&f.cfg, &f.out, &f.trained).unwrap();
    pipeline::sweep_mu(&f.cfg, &out, &ctx).unwrap();
    assert_eq!(std::fs::read(out.path("sweep_mu.csv")).unwrap(), original);
}

#[test]
fn report_is_reproducible() {
    let f = common::fixture();
    let dir = tempfile::tempdir().unwrap();
    let out = Layout::new(dir.path()).unwrap();
    for name in SWEEP_FILES.iter().chain(&["pretrain_curve.csv", "finetune_curve.csv"]) {
        std::fs::copy(f.out.path(name), out.path(name)).unwrap();
    }
    let ctx = pipeline::context(&f.cfg, &f.out, &f.trained).unwrap();
    let summary = sesc_harness::report::emit(&f.cfg, &out, &f.trained, &ctx).unwrap();
    for png in ["sweep_l.png", "sweep_snr.png", "sweep_mu.png", "training.png"] {
        let a = std::fs::read(f.out.path(png)).unwrap();
        assert!(!a.is_empty());
        assert_eq!(a, std::fs::read(out.path(png)).unwrap(), "{png}");
    }
    assert_eq!(std::fs::read_to_string(f.out.path("summary.txt")).unwrap(), summary.text);
    for id in 1..=9 {
        assert!(summary.text.contains(&format!("] {id}. ")), "criterion {id} missing from summary");
    }
}
