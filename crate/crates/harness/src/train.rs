//! Masked-autoencoder pretraining and channel-in-the-loop fine-tuning.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sesc::autograd::Graph;
use sesc::channel::TrainingChannel;
use sesc::codec::{patchify, PatchSequence};
use sesc::params::AdamW;
use sesc::tasks::{cosine_lr, shuffle, LabeledImage};
use sesc::{derive_seed, CodecModel, MaskBitmap};

use crate::config::ExperimentConfig;
use crate::HarnessError;

/// One line of a training curve.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRow {
    pub stage: String,
    pub epoch: usize,
    pub train_loss: f64,
    /// Noiseless reconstruction MSE with every feature sent.
    pub val_mse: f64,
}

/// Random bitmap sending `l - round(ratio * l)` features (at least one).
pub fn random_bitmap<R: Rng>(l: usize, ratio: f64, rng: &mut R) -> MaskBitmap {
    let keep = (l - (ratio * l as f64).round() as usize).max(1);
    let mut idx: Vec<usize> = (0..l).collect();
    shuffle(&mut idx, rng);
    MaskBitmap::from_indices(l, &idx[..keep]).expect("keep >= 1")
}

pub fn patchify_all(model: &CodecModel, data: &[LabeledImage]) -> Result<Vec<PatchSequence>, HarnessError> {
    Ok(data.iter().map(|d| patchify(&d.image, model.config().patch_size)).collect::<sesc::Result<_>>()?)
}

/// Mean per-pixel MSE of noiseless full transmission (clamped output).
pub fn validation_mse(model: &CodecModel, val: &[LabeledImage]) -> Result<f64, HarnessError> {
    let cfg = *model.config();
    let mut total = 0.0;
    for chunk in val.chunks(64) {
        let patches = patchify_all(model, chunk)?;
        let refs: Vec<&PatchSequence> = patches.iter().collect();
        let feats = model.encode_batch(&refs)?;
        let frefs: Vec<_> = feats.iter().collect();
        let out = model.decode_batch(&frefs, cfg.image_height, cfg.image_width)?;
        total += out.iter().zip(chunk).map(|(o, d)| o.mse(&d.image)).sum::<f64>();
    }
    Ok(total / val.len() as f64)
}

struct Schedule {
    epochs: usize,
    batch_size: usize,
    learning_rate: f64,
    weight_decay: f64,
    warmup_steps: usize,
    grad_clip: f64,
}

enum Stage<'a> {
    Pretrain { mask_ratio: f64 },
    Finetune { low: f64, high: f64, channel: &'a TrainingChannel },
}

fn run(
    stage_name: &str,
    mut model: CodecModel,
    train: &[LabeledImage],
    val: &[LabeledImage],
    sched: &Schedule,
    stage: Stage<'_>,
    seed: u64,
) -> Result<(CodecModel, Vec<EpochRow>), HarnessError> {
    let l = model.config().seq_len();
    let patches = patchify_all(&model, train)?;
    let mut opt = AdamW::new(model.params(), sched.weight_decay);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let steps_per_epoch = train.len().div_ceil(sched.batch_size);
    let total = sched.epochs * steps_per_epoch;
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut rows = Vec::with_capacity(sched.epochs);
    let mut step = 0;
    for epoch in 1..=sched.epochs {
        shuffle(&mut order, &mut rng);
        let mut loss_sum = 0.0;
        for chunk in order.chunks(sched.batch_size) {
            let refs: Vec<&PatchSequence> = chunk.iter().map(|&i| &patches[i]).collect();
            let target = PatchSequence::stack::<f32>(&refs);
            let ratio = match stage {
                Stage::Pretrain { mask_ratio } => mask_ratio,
                Stage::Finetune { low, high, .. } => {
                    if low == high {
                        low
                    } else {
                        rng.random_range(low..=high)
                    }
                }
            };
            let bitmaps: Vec<MaskBitmap> = (0..chunk.len()).map(|_| random_bitmap(l, ratio, &mut rng)).collect();
            let mut grads = {
                let mut g = Graph::new(model.params());
                let fwd = match stage {
                    Stage::Pretrain { .. } => model.forward_train(&mut g, &target, &bitmaps)?,
                    Stage::Finetune { channel, .. } => {
                        let mut apply = |g: &mut Graph<'_, f32>, x, frames: &[std::ops::Range<usize>]| channel.apply(g, x, frames, &mut rng).0;
                        model.forward_train_with_channel(&mut g, &target, &bitmaps, &mut apply)?
                    }
                };
                let loss = g.mse(fwd.reconstruction, target);
                let value = g.value(loss).data()[0] as f64;
                if !value.is_finite() {
                    return Err(HarnessError::Training(format!("{stage_name}: loss became {value} at step {step}")));
                }
                loss_sum += value * chunk.len() as f64;
                g.backward(loss).into_params()
            };
            let norm = grads.norm() as f64;
            if norm > sched.grad_clip {
                grads.scale((sched.grad_clip / norm) as f32);
            }
            let lr = cosine_lr(sched.learning_rate, step, total, sched.warmup_steps.min(total / 2));
            opt.step(model.params_mut(), &grads, lr);
            step += 1;
        }
        let val_mse = validation_mse(&model, val)?;
        rows.push(EpochRow {
            stage: stage_name.to_owned(),
            epoch,
            train_loss: loss_sum / train.len() as f64,
            val_mse,
        });
    }
    let first = rows.first().map_or(f64::INFINITY, |r| r.val_mse);
    let best = rows.iter().map(|r| r.val_mse).fold(f64::INFINITY, f64::min);
    if rows.len() > 1 && best >= first {
        return Err(HarnessError::Training(format!("{stage_name}: validation MSE never improved on {first:.5}")));
    }
    model.meta.validation_mse = rows.last().map(|r| r.val_mse);
    model.meta.training_seed = seed;
    Ok((model, rows))
}

/// Random-masking reconstruction training from scratch.
pub fn pretrain(cfg: &ExperimentConfig, train: &[LabeledImage], val: &[LabeledImage]) -> Result<(CodecModel, Vec<EpochRow>), HarnessError> {
    let p = &cfg.pretrain;
    let model = CodecModel::initialized(cfg.codec, derive_seed(cfg.master_seed, 10))?;
    let sched = Schedule {
        epochs: p.epochs,
        batch_size: p.batch_size,
        learning_rate: p.learning_rate,
        weight_decay: p.weight_decay,
        warmup_steps: p.warmup_steps,
        grad_clip: p.grad_clip,
    };
    run("pretrain", model, train, val, &sched, Stage::Pretrain { mask_ratio: p.mask_ratio }, derive_seed(cfg.master_seed, 11))
}

/// Continues training with power normalization and the training channel
/// between encoder and decoder.
pub fn finetune(cfg: &ExperimentConfig, start: &CodecModel, train: &[LabeledImage], val: &[LabeledImage]) -> Result<(CodecModel, Vec<EpochRow>), HarnessError> {
    let f = &cfg.finetune;
    let channel = TrainingChannel::new(f.channel, f.snr_db_low, f.snr_db_high);
    let sched = Schedule {
        epochs: f.epochs,
        batch_size: f.batch_size,
        learning_rate: f.learning_rate,
        weight_decay: f.weight_decay,
        warmup_steps: f.warmup_steps,
        grad_clip: f.grad_clip,
    };
    let stage = Stage::Finetune {
        low: f.mask_ratio_low,
        high: f.mask_ratio_high,
        channel: &channel,
    };
    run("finetune", start.clone(), train, val, &sched, stage, derive_seed(cfg.master_seed, 12))
}
