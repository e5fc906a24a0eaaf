//! Pipeline stages and their on-disk artifacts.
//!
//! Every stage reads its inputs from and writes its outputs to one output
//! directory. Training stages reuse an existing checkpoint unless forced;
//! sweeps resume from the rows already in their CSV.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};

use serde::Serialize;
use sesc::aware::{entropy_weights, fingerprint, task_weights, CorpusStats, WeightModel, WeightVector};
use sesc::checkpoint::{load_codec, load_task, save_codec, save_task};
use sesc::seed::derive_path;
use sesc::tasks::{generate_range, read_dataset, train_task_model, write_dataset, LabeledImage, TaskModel, TaskTrainReport};
use sesc::{derive_seed, CodecModel};

use crate::config::ExperimentConfig;
use crate::sweeps::{self, EvalContext, SweepRow};
use crate::train::{self, EpochRow};
use crate::HarnessError;

/// First generator index of each split; the splits never overlap.
pub const VAL_START: u64 = 1 << 32;
pub const EVAL_START: u64 = 2 << 32;

pub const SWEEP_FILES: [&str; 4] = ["sweep_l.csv", "sweep_snr.csv", "sweep_mu.csv", "baseline.csv"];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Eval,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Eval => "eval",
        }
    }
}

/// Paths inside an output directory.
#[derive(Clone, Debug)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(root: impl Into<PathBuf>) -> Result<Self, HarnessError> {
        let root = root.into();
        std::fs::create_dir_all(&root).map_err(|e| HarnessError::Io(root.display().to_string(), e))?;
        Ok(Self { root })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    pub fn data(&self, split: Split) -> PathBuf {
        self.path(&format!("data_{}.bin", split.name()))
    }

    pub fn pretrain(&self) -> PathBuf {
        self.path("pretrain.ckpt")
    }

    pub fn finetune(&self) -> PathBuf {
        self.path("finetune.ckpt")
    }

    pub fn task(&self) -> PathBuf {
        self.path("task.ckpt")
    }
}

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> HarnessError + '_ {
    move |e| HarnessError::Io(path.display().to_string(), e)
}

pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<(), HarnessError> {
    let mut w = csv::Writer::from_writer(BufWriter::new(File::create(path).map_err(io(path))?));
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(io(path))?;
    Ok(())
}

pub fn read_csv<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>, HarnessError> {
    let mut r = csv::Reader::from_reader(BufReader::new(File::open(path).map_err(io(path))?));
    Ok(r.deserialize().collect::<Result<_, _>>()?)
}

/// Rows already on disk, or none.
pub fn existing_rows(path: &Path) -> Result<Vec<SweepRow>, HarnessError> {
    if path.exists() {
        read_csv(path)
    } else {
        Ok(Vec::new())
    }
}

fn split_range(cfg: &ExperimentConfig, split: Split) -> (u64, usize) {
    match split {
        Split::Train => (0, cfg.data.train_count),
        Split::Val => (VAL_START, cfg.data.val_count),
        Split::Eval => (EVAL_START, cfg.data.eval_count),
    }
}

/// Generates the three dataset splits, skipping files that already hold
/// the requested images.
pub fn gen_data(cfg: &ExperimentConfig, out: &Layout) -> Result<(), HarnessError> {
    for split in [Split::Train, Split::Val, Split::Eval] {
        let path = out.data(split);
        let (start, count) = split_range(cfg, split);
        if path.exists() {
            if let Ok(data) = load_split(cfg, out, split) {
                if data.len() == count {
                    continue;
                }
            }
        }
        let data = generate_range(cfg.data.seed, start, count);
        let mut w = BufWriter::new(File::create(&path).map_err(io(&path))?);
        write_dataset(&mut w, cfg.data.seed, &data)?;
        std::io::Write::flush(&mut w).map_err(io(&path))?;
    }
    Ok(())
}

/// Reads a split from the cache, checking its seed.
pub fn load_split(cfg: &ExperimentConfig, out: &Layout, split: Split) -> Result<Vec<LabeledImage>, HarnessError> {
    let path = out.data(split);
    let (seed, data) = read_dataset(BufReader::new(File::open(&path).map_err(io(&path))?))?;
    if seed != cfg.data.seed {
        return Err(HarnessError::Check(format!("{} was generated with seed {seed}, config says {}", path.display(), cfg.data.seed)));
    }
    Ok(data)
}

fn load_or_gen(cfg: &ExperimentConfig, out: &Layout, split: Split) -> Result<Vec<LabeledImage>, HarnessError> {
    if !out.data(split).exists() {
        gen_data(cfg, out)?;
    }
    load_split(cfg, out, split)
}

fn train_stage(
    out: &Layout,
    ckpt: &Path,
    curve: &str,
    force: bool,
    run: impl FnOnce() -> Result<(CodecModel, Vec<EpochRow>), HarnessError>,
) -> Result<CodecModel, HarnessError> {
    if ckpt.exists() && !force {
        return Ok(load_codec(ckpt)?.0);
    }
    let (model, rows) = run()?;
    write_csv(&out.path(curve), &rows)?;
    let first = rows.first().map_or(f64::NAN, |r| r.val_mse);
    let extra = serde_json::json!({ "first_epoch_val_mse": first });
    save_codec(ckpt, &model, extra)?;
    Ok(model)
}

pub fn pretrain(cfg: &ExperimentConfig, out: &Layout, force: bool) -> Result<CodecModel, HarnessError> {
    let train = load_or_gen(cfg, out, Split::Train)?;
    let val = load_or_gen(cfg, out, Split::Val)?;
    train_stage(out, &out.pretrain(), "pretrain_curve.csv", force, || train::pretrain(cfg, &train, &val))
}

pub fn finetune(cfg: &ExperimentConfig, out: &Layout, force: bool) -> Result<CodecModel, HarnessError> {
    let start = pretrain(cfg, out, false)?;
    let train = load_or_gen(cfg, out, Split::Train)?;
    let val = load_or_gen(cfg, out, Split::Val)?;
    train_stage(out, &out.finetune(), "finetune_curve.csv", force, || train::finetune(cfg, &start, &train, &val))
}

/// Trains the frozen classifier; its held-out check uses the validation split.
pub fn train_task(cfg: &ExperimentConfig, out: &Layout, force: bool) -> Result<TaskModel, HarnessError> {
    let path = out.task();
    if path.exists() && !force {
        return Ok(load_task(&path)?.0);
    }
    let train = load_or_gen(cfg, out, Split::Train)?;
    let val = load_or_gen(cfg, out, Split::Val)?;
    let mut tc = cfg.task;
    tc.seed = derive_path(cfg.master_seed, &[13, cfg.task.seed]);
    let (model, report): (TaskModel, TaskTrainReport) = train_task_model(&train, &val, &tc)?;
    save_task(&path, &model, tc.seed, serde_json::to_value(&report).map_err(|e| HarnessError::Check(e.to_string()))?)?;
    Ok(model)
}

/// Frozen models and evaluation data loaded for the sweeps.
pub struct Trained {
    pub pretrained: CodecModel,
    pub finetuned: CodecModel,
    pub task: TaskModel,
    pub eval: Vec<LabeledImage>,
}

pub fn load_trained(cfg: &ExperimentConfig, out: &Layout) -> Result<Trained, HarnessError> {
    Ok(Trained {
        pretrained: pretrain(cfg, out, false)?,
        finetuned: finetune(cfg, out, false)?,
        task: train_task(cfg, out, false)?,
        eval: load_or_gen(cfg, out, Split::Eval)?,
    })
}

/// Per-image weight vectors of the evaluation split under the configured
/// weight model. Entropy statistics are estimated on the training split and
/// cached as JSON.
pub fn eval_weights(cfg: &ExperimentConfig, out: &Layout, t: &Trained) -> Result<Vec<WeightVector>, HarnessError> {
    let ps = cfg.codec.patch_size;
    match cfg.sweeps.weight_model {
        WeightModel::Task => Ok(t.eval.iter().map(|d| task_weights(&d.image, &t.task, ps)).collect::<sesc::Result<_>>()?),
        WeightModel::Entropy => {
            let path = out.path("corpus_stats.json");
            let ckpt = std::fs::read(out.finetune()).map_err(io(&out.finetune()))?;
            let data = std::fs::read(out.data(Split::Train)).map_err(io(&out.data(Split::Train)))?;
            let fp = fingerprint([&ckpt[..], &data[..]]);
            let cached = std::fs::read_to_string(&path).ok().and_then(|s| CorpusStats::from_json(&s).ok());
            let stats = match cached {
                Some(s) if s.fingerprint == fp => s,
                _ => {
                    let train = load_split(cfg, out, Split::Train)?;
                    let mut feats = Vec::with_capacity(train.len());
                    for chunk in train.chunks(64) {
                        let patches = train::patchify_all(&t.finetuned, chunk)?;
                        let refs: Vec<_> = patches.iter().collect();
                        feats.extend(t.finetuned.encode_batch(&refs)?);
                    }
                    let s = CorpusStats::estimate(&feats, fp)?;
                    std::fs::write(&path, s.to_json()?).map_err(io(&path))?;
                    s
                }
            };
            let mut w = Vec::with_capacity(t.eval.len());
            for chunk in t.eval.chunks(64) {
                let patches = train::patchify_all(&t.finetuned, chunk)?;
                let refs: Vec<_> = patches.iter().collect();
                for f in t.finetuned.encode_batch(&refs)? {
                    w.push(entropy_weights(&f, &stats)?);
                }
            }
            Ok(w)
        }
    }
}

pub fn context<'a>(cfg: &ExperimentConfig, out: &Layout, t: &'a Trained) -> Result<EvalContext<'a>, HarnessError> {
    let weights = eval_weights(cfg, out, t)?;
    EvalContext::new(&t.finetuned, &t.pretrained, &t.task, &t.eval, weights, derive_seed(cfg.master_seed, 20))
}

pub fn sweep_l(cfg: &ExperimentConfig, out: &Layout, ctx: &EvalContext<'_>) -> Result<Vec<SweepRow>, HarnessError> {
    let path = out.path("sweep_l.csv");
    let s = &cfg.sweeps;
    let rows = sweeps::sweep_l(ctx, s.l_sweep_channel, s.l_sweep_snr_db, s.replicates, s.l_sweep_images, existing_rows(&path)?)?;
    write_csv(&path, &rows)?;
    Ok(rows)
}

pub fn sweep_snr(cfg: &ExperimentConfig, out: &Layout, ctx: &EvalContext<'_>) -> Result<Vec<SweepRow>, HarnessError> {
    let path = out.path("sweep_snr.csv");
    let s = &cfg.sweeps;
    let rows = sweeps::sweep_snr(ctx, s.channel, &s.snr_grid_db, &s.snr_sweep_mu, &cfg.baseline, s.replicates, existing_rows(&path)?)?;
    write_csv(&path, &rows)?;
    Ok(rows)
}

pub fn sweep_mu(cfg: &ExperimentConfig, out: &Layout, ctx: &EvalContext<'_>) -> Result<Vec<SweepRow>, HarnessError> {
    let path = out.path("sweep_mu.csv");
    let s = &cfg.sweeps;
    let rows = sweeps::sweep_mu(ctx, s.channel, s.mu_sweep_snr_db, &s.mu_grid, s.replicates, existing_rows(&path)?)?;
    write_csv(&path, &rows)?;
    Ok(rows)
}

pub fn baseline_eval(cfg: &ExperimentConfig, out: &Layout, ctx: &EvalContext<'_>) -> Result<Vec<SweepRow>, HarnessError> {
    let path = out.path("baseline.csv");
    let s = &cfg.sweeps;
    let rows = sweeps::baseline_eval(ctx, s.channel, &s.snr_grid_db, &cfg.baseline, s.replicates, existing_rows(&path)?)?;
    write_csv(&path, &rows)?;
    Ok(rows)
}

/// Every stage in order: data, training, sweeps and the report.
pub fn run_all(cfg: &ExperimentConfig, out: &Layout) -> Result<crate::report::Summary, HarnessError> {
    std::fs::write(out.path("config.toml"), cfg.to_toml()).map_err(io(&out.path("config.toml")))?;
    gen_data(cfg, out)?;
    let t = load_trained(cfg, out)?;
    let ctx = context(cfg, out, &t)?;
    sweep_l(cfg, out, &ctx)?;
    sweep_snr(cfg, out, &ctx)?;
    sweep_mu(cfg, out, &ctx)?;
    baseline_eval(cfg, out, &ctx)?;
    crate::report::emit(cfg, out, &t, &ctx)
}
