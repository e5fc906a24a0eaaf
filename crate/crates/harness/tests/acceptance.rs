//! Runs every acceptance criterion and prints one line per criterion.
//!
//! Criteria 1 to 8 come from the shared full-size pipeline run. Criterion 9
//! repeats that run from scratch in a fresh directory and compares the
//! artifacts byte for byte.

mod common;

use std::process::ExitCode;
use std::time::Instant;

use sesc_harness::criteria::{determinism, Criterion};
use sesc_harness::pipeline::{self, Layout, SWEEP_FILES};

fn determinism_run(f: &common::Fixture) -> Criterion {
    let dir = tempfile::tempdir().expect("tempdir");
    let out = Layout::new(dir.path()).expect("layout");
    pipeline::run_all(&f.cfg, &out).expect("second run");
    let (a, b) = (f.dir.as_path(), dir.path());
    let mut names: Vec<&str> = SWEEP_FILES.to_vec();
    names.extend(["pretrain_curve.csv", "finetune_curve.csv"]);
    let mut c = determinism(a, b, &names).expect("artifacts present");
    let ckpt_diff: Vec<&str> = ["pretrain.ckpt", "finetune.ckpt", "task.ckpt"]
        .into_iter()
        .filter(|n| std::fs::read(a.join(n)).unwrap() != std::fs::read(b.join(n)).unwrap())
        .collect();
    if ckpt_diff.is_empty() {
        c.measured.push_str("; checkpoints identical");
    } else {
        c.pass = false;
        c.measured.push_str(&format!("; differing checkpoints: {}", ckpt_diff.join(", ")));
    }
    c
}

fn main() -> ExitCode {
    let start = Instant::now();
    let f = common::fixture();
    let mut criteria = f.summary.criteria.clone();
    criteria.retain(|c| c.id != 9);
    criteria.push(determinism_run(f));
    criteria.sort_by_key(|c| c.id);
    println!();
    for c in &criteria {
        println!("{c}");
    }
    println!("acceptance suite finished in {:.0} s", start.elapsed().as_secs_f64());
    let failed: Vec<u8> = criteria.iter().filter(|c| !c.pass).map(|c| c.id).collect();
    if criteria.len() == 9 && failed.is_empty() {
        ExitCode::SUCCESS
    } else {
        println!("failed criteria: {failed:?}");
        ExitCode::FAILURE
    }
}
