//! Experiment sweeps over sent-feature count, SNR and threshold, plus the
//! reference codec.
//!
//! Channel realizations depend only on (sweep, replicate, image), so every
//! scheme and grid point of a sweep sees the same fades and noise draws.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sesc::aware::{select_threshold, select_topk, WeightVector};
use sesc::baseline::{baseline_transmit, BaselineConfig};
use sesc::channel::{transmit, ChannelConfig, ChannelKind};
use sesc::codec::{features_to_symbols, symbols_to_features, FeatureSequence, Image};
use sesc::framing::overhead_symbols;
use sesc::seed::derive_path;
use sesc::tasks::{cosine, embedding_batch, task_metric, LabeledImage, TaskModel};
use sesc::{CodecModel, MaskBitmap};

use crate::HarnessError;

/// Stream identifiers for [`derive_path`]. The threshold sweep shares the
/// SNR sweep's stream, so equal grid points see identical channel draws.
pub const STREAM_L: u64 = 100;
pub const STREAM_SNR: u64 = 101;

/// One row of any sweep CSV; averages over the evaluation images.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    /// `sesc`, `full` or `baseline`.
    pub scheme: String,
    pub channel: ChannelKind,
    pub snr_db: f64,
    pub mu: Option<f64>,
    pub sent: Option<usize>,
    pub replicate: usize,
    pub seed: u64,
    pub images: usize,
    /// Mean number of features sent (`n`).
    pub n_mean: f64,
    pub symbols_payload: f64,
    pub symbols_with_overhead: f64,
    pub accuracy: f64,
    pub similarity: f64,
    pub mse: f64,
    /// Fraction of images whose reference-codec bitstream failed to decode.
    pub failure_rate: f64,
}

impl SweepRow {
    /// Identity of the grid point and replicate; used to resume sweeps.
    pub fn key(&self) -> String {
        format!(
            "{}|{}|{}|{}|{}|{}",
            self.scheme,
            self.channel,
            self.snr_db,
            self.mu.map_or("-".into(), |m| m.to_string()),
            self.sent.map_or("-".into(), |s| s.to_string()),
            self.replicate
        )
    }
}

/// Frozen models, evaluation images and everything precomputed from them.
pub struct EvalContext<'a> {
    pub codec: &'a CodecModel,
    /// Channel-free encoder defining semantic similarity.
    pub embed: &'a CodecModel,
    pub task: &'a TaskModel,
    pub data: &'a [LabeledImage],
    pub features: Vec<FeatureSequence>,
    pub weights: Vec<WeightVector>,
    pub clean_embeddings: Vec<Vec<f64>>,
    pub master_seed: u64,
}

/// Aggregate quality of a batch of reconstructions.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Quality {
    pub accuracy: f64,
    pub similarity: f64,
    pub mse: f64,
}

impl<'a> EvalContext<'a> {
    pub fn new(
        codec: &'a CodecModel,
        embed: &'a CodecModel,
        task: &'a TaskModel,
        data: &'a [LabeledImage],
        weights: Vec<WeightVector>,
        master_seed: u64,
    ) -> Result<Self, HarnessError> {
        if weights.len() != data.len() {
            return Err(HarnessError::Check(format!("{} weight vectors for {} images", weights.len(), data.len())));
        }
        let mut features = Vec::with_capacity(data.len());
        let mut clean_embeddings = Vec::with_capacity(data.len());
        for chunk in data.chunks(64) {
            let patches = crate::train::patchify_all(codec, chunk)?;
            let refs: Vec<_> = patches.iter().collect();
            features.extend(codec.encode_batch(&refs)?);
            let imgs: Vec<&Image> = chunk.iter().map(|d| &d.image).collect();
            clean_embeddings.extend(embedding_batch(embed, &imgs)?);
        }
        Ok(Self {
            codec,
            embed,
            task,
            data,
            features,
            weights,
            clean_embeddings,
            master_seed,
        })
    }

    pub fn l_total(&self) -> usize {
        self.codec.config().seq_len()
    }

    pub fn symbols_per_feature(&self) -> usize {
        self.codec.config().symbols_per_feature()
    }

    /// Channel seed of image `i` in replicate `rep` of sweep `stream`.
    pub fn channel_seed(&self, stream: u64, rep: usize, i: usize) -> u64 {
        derive_path(self.master_seed, &[stream, rep as u64, i as u64])
    }

    /// Sends the features selected by `bitmaps[i]` of image `i` (for `i` in
    /// `subset`) and decodes them at the receiver.
    pub fn transmit(&self, subset: &[usize], bitmaps: &[MaskBitmap], kind: ChannelKind, snr_db: f64, stream: u64, rep: usize) -> Result<Vec<Image>, HarnessError> {
        let cfg = *self.codec.config();
        let mut seqs = Vec::with_capacity(subset.len());
        for (&i, bitmap) in subset.iter().zip(bitmaps) {
            let kept = self.features[i].select(bitmap)?;
            let frame = features_to_symbols(&kept, bitmap)?;
            let ch = ChannelConfig::new(kind, snr_db, self.channel_seed(stream, rep, i));
            let (rx, _) = transmit(&frame, &ch)?;
            let received = symbols_to_features(&rx)?;
            seqs.push(self.codec.reconstruct_sequence(&received, bitmap)?);
        }
        let mut out = Vec::with_capacity(seqs.len());
        for chunk in seqs.chunks(64) {
            let refs: Vec<_> = chunk.iter().collect();
            out.extend(self.codec.decode_batch(&refs, cfg.image_height, cfg.image_width)?);
        }
        Ok(out)
    }

    /// Task accuracy, mean semantic similarity to the originals and mean
    /// per-pixel MSE of reconstructions of the images in `subset`.
    pub fn quality(&self, subset: &[usize], recon: &[Image], with_similarity: bool) -> Result<Quality, HarnessError> {
        let imgs: Vec<&Image> = recon.iter().collect();
        let labels: Vec<usize> = subset.iter().map(|&i| self.data[i].label).collect();
        let accuracy = task_metric(self.task, &imgs, &labels)?;
        let mse = subset.iter().zip(recon).map(|(&i, r)| r.mse(&self.data[i].image)).sum::<f64>() / subset.len() as f64;
        let similarity = if with_similarity {
            let mut sum = 0.0;
            for (chunk_idx, chunk) in imgs.chunks(64).enumerate() {
                let emb = embedding_batch(self.embed, chunk)?;
                for (k, e) in emb.iter().enumerate() {
                    sum += cosine(e, &self.clean_embeddings[subset[chunk_idx * 64 + k]])?;
                }
            }
            sum / subset.len() as f64
        } else {
            f64::NAN
        };
        Ok(Quality { accuracy, similarity, mse })
    }

    fn sesc_row(&self, scheme: &str, subset: &[usize], bitmaps: &[MaskBitmap], point: GridPoint, stream: u64, with_similarity: bool) -> Result<SweepRow, HarnessError> {
        let recon = self.transmit(subset, bitmaps, point.channel, point.snr_db, stream, point.replicate)?;
        let q = self.quality(subset, &recon, with_similarity)?;
        let n_mean = bitmaps.iter().map(|b| b.popcount() as f64).sum::<f64>() / bitmaps.len() as f64;
        let payload = n_mean * self.symbols_per_feature() as f64;
        Ok(SweepRow {
            scheme: scheme.into(),
            channel: point.channel,
            snr_db: point.snr_db,
            mu: point.mu,
            sent: point.sent,
            replicate: point.replicate,
            seed: derive_path(self.master_seed, &[stream, point.replicate as u64]),
            images: subset.len(),
            n_mean,
            symbols_payload: payload,
            symbols_with_overhead: payload + overhead_symbols(self.l_total()),
            accuracy: q.accuracy,
            similarity: q.similarity,
            mse: q.mse,
            failure_rate: 0.0,
        })
    }

    pub fn threshold_bitmaps(&self, subset: &[usize], mu: f64) -> Result<Vec<MaskBitmap>, HarnessError> {
        Ok(subset.iter().map(|&i| select_threshold(&self.weights[i], mu)).collect::<sesc::Result<_>>()?)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
struct GridPoint {
    channel: ChannelKind,
    snr_db: f64,
    mu: Option<f64>,
    sent: Option<usize>,
    replicate: usize,
}

fn all(ctx: &EvalContext<'_>) -> Vec<usize> {
    (0..ctx.data.len()).collect()
}

/// Runs the jobs whose key is not in `done`, in parallel, and returns the
/// union sorted in job order.
fn run_jobs<J: Sync>(
    jobs: Vec<(String, J)>,
    done: Vec<SweepRow>,
    f: impl Fn(&J) -> Result<SweepRow, HarnessError> + Sync,
) -> Result<Vec<SweepRow>, HarnessError> {
    let mut existing: std::collections::HashMap<String, SweepRow> = done.into_iter().map(|r| (r.key(), r)).collect();
    let fresh: Vec<(usize, SweepRow)> = jobs
        .par_iter()
        .enumerate()
        .filter(|(_, (key, _))| !existing.contains_key(key))
        .map(|(i, (_, job))| f(job).map(|r| (i, r)))
        .collect::<Result<_, _>>()?;
    let mut fresh = fresh.into_iter().peekable();
    let mut out = Vec::with_capacity(jobs.len());
    for (i, (key, _)) in jobs.iter().enumerate() {
        match fresh.peek() {
            Some((j, _)) if *j == i => out.push(fresh.next().unwrap().1),
            _ => out.push(existing.remove(key).ok_or_else(|| HarnessError::Check(format!("missing row {key}")))?),
        }
    }
    Ok(out)
}

fn key_of(scheme: &str, p: &GridPoint) -> String {
    SweepRow {
        scheme: scheme.into(),
        channel: p.channel,
        snr_db: p.snr_db,
        mu: p.mu,
        sent: p.sent,
        replicate: p.replicate,
        seed: 0,
        images: 0,
        n_mean: 0.0,
        symbols_payload: 0.0,
        symbols_with_overhead: 0.0,
        accuracy: 0.0,
        similarity: 0.0,
        mse: 0.0,
        failure_rate: 0.0,
    }
    .key()
}

/// Semantic similarity versus the number of sent features (top-`L` by
/// weight), for `L = 1..=l`, over the first `images` evaluation images.
pub fn sweep_l(ctx: &EvalContext<'_>, channel: ChannelKind, snr_db: f64, replicates: usize, images: usize, done: Vec<SweepRow>) -> Result<Vec<SweepRow>, HarnessError> {
    let subset: Vec<usize> = (0..images.min(ctx.data.len())).collect();
    let l = ctx.l_total();
    let mut jobs = Vec::new();
    for sent in 1..=l {
        for replicate in 0..replicates {
            let p = GridPoint {
                channel,
                snr_db,
                mu: None,
                sent: Some(sent),
                replicate,
            };
            jobs.push((key_of("sesc", &p), p));
        }
    }
    run_jobs(jobs, done, |p| {
        let sent = p.sent.unwrap();
        let bitmaps = subset.iter().map(|&i| select_topk(&ctx.weights[i], sent)).collect::<sesc::Result<Vec<_>>>()?;
        ctx.sesc_row("sesc", &subset, &bitmaps, *p, STREAM_L, true)
    })
}

/// Mean over replicates of `field` per distinct `x`, in ascending `x`.
pub fn mean_curve(rows: &[SweepRow], x: impl Fn(&SweepRow) -> f64, field: impl Fn(&SweepRow) -> f64) -> Vec<(f64, f64)> {
    let mut acc: Vec<(f64, f64, usize)> = Vec::new();
    for r in rows {
        let xv = x(r);
        match acc.iter_mut().find(|a| a.0 == xv) {
            Some(a) => {
                a.1 += field(r);
                a.2 += 1;
            }
            None => acc.push((xv, field(r), 1)),
        }
    }
    acc.sort_by(|a, b| a.0.total_cmp(&b.0));
    acc.into_iter().map(|(x, s, n)| (x, s / n as f64)).collect()
}

/// Standard deviation over replicates of `field` per distinct `x`.
pub fn std_curve(rows: &[SweepRow], x: impl Fn(&SweepRow) -> f64 + Copy, field: impl Fn(&SweepRow) -> f64 + Copy) -> Vec<(f64, f64)> {
    let means = mean_curve(rows, x, field);
    means
        .iter()
        .map(|&(xv, m)| {
            let vals: Vec<f64> = rows.iter().filter(|r| x(r) == xv).map(field).collect();
            let var = vals.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (vals.len().max(2) - 1) as f64;
            (xv, var.sqrt())
        })
        .collect()
}

/// Scheme identifier of a threshold row: `full` for `mu = 0`.
pub fn threshold_scheme(mu: f64) -> &'static str {
    if mu == 0.0 {
        "full"
    } else {
        "sesc"
    }
}

/// Task accuracy and symbol use versus SNR for each threshold (0 = full
/// transmission) and for the reference codec.
pub fn sweep_snr(
    ctx: &EvalContext<'_>,
    channel: ChannelKind,
    snr_grid: &[f64],
    mus: &[f64],
    baseline: &BaselineConfig,
    replicates: usize,
    done: Vec<SweepRow>,
) -> Result<Vec<SweepRow>, HarnessError> {
    let subset = all(ctx);
    let mut jobs = Vec::new();
    for &snr_db in snr_grid {
        for &mu in mus {
            for replicate in 0..replicates {
                let p = GridPoint {
                    channel,
                    snr_db,
                    mu: Some(mu),
                    sent: None,
                    replicate,
                };
                jobs.push((key_of(threshold_scheme(mu), &p), p));
            }
        }
        for replicate in 0..replicates {
            let p = GridPoint {
                channel,
                snr_db,
                mu: None,
                sent: None,
                replicate,
            };
            jobs.push((key_of("baseline", &p), p));
        }
    }
    run_jobs(jobs, done, |p| match p.mu {
        Some(mu) => {
            let bitmaps = ctx.threshold_bitmaps(&subset, mu)?;
            ctx.sesc_row(threshold_scheme(mu), &subset, &bitmaps, *p, STREAM_SNR, false)
        }
        None => baseline_row(ctx, &subset, baseline, *p),
    })
}

fn baseline_row(ctx: &EvalContext<'_>, subset: &[usize], cfg: &BaselineConfig, p: GridPoint) -> Result<SweepRow, HarnessError> {
    let mut recon = Vec::with_capacity(subset.len());
    let (mut symbols, mut failures) = (0usize, 0usize);
    for &i in subset {
        let ch = ChannelConfig::new(p.channel, p.snr_db, ctx.channel_seed(STREAM_SNR, p.replicate, i));
        let out = baseline_transmit(&ctx.data[i].image, cfg, &ch)?;
        symbols += out.symbols;
        failures += out.failure.is_some() as usize;
        recon.push(out.image);
    }
    let q = ctx.quality(subset, &recon, false)?;
    let payload = symbols as f64 / subset.len() as f64;
    Ok(SweepRow {
        scheme: "baseline".into(),
        channel: p.channel,
        snr_db: p.snr_db,
        mu: None,
        sent: None,
        replicate: p.replicate,
        seed: derive_path(ctx.master_seed, &[STREAM_SNR, p.replicate as u64]),
        images: subset.len(),
        n_mean: f64::NAN,
        symbols_payload: payload,
        symbols_with_overhead: payload,
        accuracy: q.accuracy,
        similarity: f64::NAN,
        mse: q.mse,
        failure_rate: failures as f64 / subset.len() as f64,
    })
}

/// Symbol use and task accuracy versus threshold at a fixed SNR.
pub fn sweep_mu(ctx: &EvalContext<'_>, channel: ChannelKind, snr_db: f64, mu_grid: &[f64], replicates: usize, done: Vec<SweepRow>) -> Result<Vec<SweepRow>, HarnessError> {
    let subset = all(ctx);
    let mut jobs = Vec::new();
    for &mu in mu_grid {
        for replicate in 0..replicates {
            let p = GridPoint {
                channel,
                snr_db,
                mu: Some(mu),
                sent: None,
                replicate,
            };
            jobs.push((key_of(threshold_scheme(mu), &p), p));
        }
    }
    run_jobs(jobs, done, |p| {
        let mu = p.mu.unwrap();
        let bitmaps = ctx.threshold_bitmaps(&subset, mu)?;
        ctx.sesc_row(threshold_scheme(mu), &subset, &bitmaps, *p, STREAM_SNR, false)
    })
}

/// Whether every image's sent-feature count is non-increasing along the
/// sorted threshold grid. Returns the first violation if any.
pub fn per_image_monotone(ctx: &EvalContext<'_>, mu_grid: &[f64]) -> Result<Option<(usize, f64)>, HarnessError> {
    let mut grid = mu_grid.to_vec();
    grid.sort_by(f64::total_cmp);
    for (i, w) in ctx.weights.iter().enumerate() {
        let mut prev = usize::MAX;
        for &mu in &grid {
            let n = select_threshold(w, mu)?.popcount();
            if n > prev {
                return Ok(Some((i, mu)));
            }
            prev = n;
        }
    }
    Ok(None)
}

/// Reference codec alone over an SNR grid (no learned models involved
/// besides the task model used for scoring).
pub fn baseline_eval(ctx: &EvalContext<'_>, channel: ChannelKind, snr_grid: &[f64], cfg: &BaselineConfig, replicates: usize, done: Vec<SweepRow>) -> Result<Vec<SweepRow>, HarnessError> {
    let subset = all(ctx);
    let mut jobs = Vec::new();
    for &snr_db in snr_grid {
        for replicate in 0..replicates {
            let p = GridPoint {
                channel,
                snr_db,
                mu: None,
                sent: None,
                replicate,
            };
            jobs.push((key_of("baseline", &p), p));
        }
    }
    run_jobs(jobs, done, |p| baseline_row(ctx, &subset, cfg, *p))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(scheme: &str, snr: f64, rep: usize, acc: f64) -> SweepRow {
        SweepRow {
            scheme: scheme.into(),
            channel: ChannelKind::Awgn,
            snr_db: snr,
            mu: None,
            sent: None,
            replicate: rep,
            seed: 0,
            images: 1,
            n_mean: 1.0,
            symbols_payload: 1.0,
            symbols_with_overhead: 1.0,
            accuracy: acc,
            similarity: 0.0,
            mse: 0.0,
            failure_rate: 0.0,
        }
    }

    #[test]
    fn curves_average_replicates() {
        let rows = vec![row("a", 5.0, 0, 0.5), row("a", 0.0, 0, 0.1), row("a", 5.0, 1, 0.7)];
        let m = mean_curve(&rows, |r| r.snr_db, |r| r.accuracy);
        assert_eq!(m.len(), 2);
        assert_eq!(m[0], (0.0, 0.1));
        assert!((m[1].1 - 0.6).abs() < 1e-12);
        let s = std_curve(&rows, |r| r.snr_db, |r| r.accuracy);
        assert!((s[1].1 - 0.02f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn keys_distinguish_grid_points() {
        assert_ne!(row("a", 5.0, 0, 0.0).key(), row("a", 5.0, 1, 0.0).key());
        assert_ne!(row("a", 5.0, 0, 0.0).key(), row("b", 5.0, 0, 0.0).key());
        assert_eq!(row("a", 5.0, 0, 0.1).key(), row("a", 5.0, 0, 0.9).key());
    }

    #[test]
    fn run_jobs_resumes() {
        let jobs: Vec<(String, usize)> = (0..4).map(|i| (row("a", i as f64, 0, 0.0).key(), i)).collect();
        let make = |&i: &usize| Ok(row("a", i as f64, 0, i as f64));
        let full = run_jobs(jobs.clone(), Vec::new(), make).unwrap();
        let partial = vec![full[2].clone(), full[0].clone()];
        let calls = std::sync::atomic::AtomicUsize::new(0);
        let resumed = run_jobs(jobs, partial, |j| {
            calls.fetch_add(1, std::sync::atomic::Ordering::SeqCst);
            make(j)
        })
        .unwrap();
        assert_eq!(resumed, full);
        assert_eq!(calls.into_inner(), 2);
    }
}
