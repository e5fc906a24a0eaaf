//! Shared trained pipeline for the integration tests.
//!
//! The default experiment runs once into a directory under the cargo target
//! tree keyed by its configuration and the library sources, so every test
//! binary (and every later `cargo test`) reuses the same checkpoints and
//! sweep CSVs. Stages resume from whatever an interrupted run left behind.

#![allow(dead_code)]

use std::hash::{DefaultHasher, Hash, Hasher};
use std::path::{Path, PathBuf};
use std::sync::OnceLock;

use sesc_harness::config::ExperimentConfig;
use sesc_harness::pipeline::{self, Layout, Trained};
use sesc_harness::report::Summary;

pub struct Fixture {
    pub cfg: ExperimentConfig,
    pub out: Layout,
    pub dir: PathBuf,
    pub trained: Trained,
    pub summary: Summary,
}

fn hash_sources(dir: &Path, h: &mut DefaultHasher) {
    let mut entries: Vec<PathBuf> = std::fs::read_dir(dir).expect("source directory").map(|e| e.unwrap().path()).collect();
    entries.sort();
    for p in entries {
        if p.is_dir() {
            hash_sources(&p, h);
        } else if p.extension().is_some_and(|e| e == "rs") {
            std::fs::read(&p).unwrap().hash(h);
        }
    }
}

pub fn workdir(name: &str, cfg: &ExperimentConfig) -> PathBuf {
    let mut h = DefaultHasher::new();
    cfg.to_toml().hash(&mut h);
    let crates = Path::new(env!("CARGO_MANIFEST_DIR")).parent().expect("workspace crates directory");
    hash_sources(&crates.join("core/src"), &mut h);
    hash_sources(&crates.join("harness/src"), &mut h);
    Path::new(env!("CARGO_TARGET_TMPDIR")).join(format!("{name}-{:016x}", h.finish()))
}

pub fn fixture() -> &'static Fixture {
    static FIXTURE: OnceLock<Fixture> = OnceLock::new();
    FIXTURE.get_or_init(|| {
        let cfg = ExperimentConfig::default();
        let dir = workdir("pipeline", &cfg);
        let out = Layout::new(&dir).expect("output directory");
        let summary = pipeline::run_all(&cfg, &out).expect("pipeline run");
        let trained = pipeline::load_trained(&cfg, &out).expect("trained models");
        Fixture { cfg, out, dir, trained, summary }
    })
}

/// A configuration small enough to train in seconds.
pub fn reduced_config() -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.data.train_count = 256;
    cfg.data.val_count = 48;
    cfg.data.eval_count = 24;
    cfg.pretrain.epochs = 2;
    cfg.pretrain.warmup_steps = 4;
    cfg.finetune.epochs = 1;
    cfg.finetune.warmup_steps = 2;
    cfg.task.epochs = 1;
    cfg.task.min_accuracy = 0.0;
    cfg.sweeps.replicates = 1;
    cfg.sweeps.snr_grid_db = vec![0.0, 15.0];
    cfg.sweeps.mu_grid = vec![0.0, 0.5, 0.9];
    cfg.sweeps.snr_sweep_mu = vec![0.0, 0.5];
    cfg.sweeps.l_sweep_images = 8;
    cfg
}
