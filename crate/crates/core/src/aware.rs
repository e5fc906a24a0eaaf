//! Per-feature importance weights and the masking policies built on them.
//!
//! Weights live only at the transmitter; the receiver sees the bitmap.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::bitmap::MaskBitmap;
use crate::codec::{FeatureSequence, Image};
use crate::error::{Error, Result};
use crate::tasks::TaskModel;

/// Importance per feature, each entry in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightVector {
    weights: Vec<f64>,
}

impl WeightVector {
    pub fn new(weights: Vec<f64>) -> Result<Self> {
        if weights.is_empty() {
            return Err(Error::InvalidArgument("empty weight vector".into()));
        }
        if let Some(w) = weights.iter().find(|w| !(0.0..=1.0).contains(*w)) {
            return Err(Error::InvalidArgument(format!("weight {w} outside [0, 1]")));
        }
        Ok(Self { weights })
    }

    /// Min-max normalization of raw scores; all-equal scores map to 0.5.
    pub fn normalized(scores: &[f64]) -> Result<Self> {
        if scores.iter().any(|s| !s.is_finite()) {
            return Err(Error::InvalidArgument("non-finite importance score".into()));
        }
        let lo = scores.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let weights = if hi > lo {
            scores.iter().map(|s| ((s - lo) / (hi - lo)).clamp(0.0, 1.0)).collect()
        } else {
            vec![0.5; scores.len()]
        };
        Self::new(weights)
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.weights
    }

    /// Index of the largest weight, lowest index on ties.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &w) in self.weights.iter().enumerate() {
            if w > self.weights[best] {
                best = i;
            }
        }
        best
    }
}

/// How the kept set is chosen from a weight vector.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum MaskPolicy {
    Threshold { mu: f64 },
    TopK { count: usize },
}

impl MaskPolicy {
    pub fn apply(&self, w: &WeightVector) -> Result<MaskBitmap> {
        match *self {
            MaskPolicy::Threshold { mu } => select_threshold(w, mu),
            MaskPolicy::TopK { count } => select_topk(w, count),
        }
    }
}

/// Which importance model drives masking.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightModel {
    Entropy,
    Task,
}

pub const CORPUS_STATS_VERSION: u32 = 1;

/// Per-dimension mean and variance of encoder features over a corpus.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub version: u32,
    /// Hex digest identifying the corpus and encoder the statistics came from.
    pub fingerprint: String,
    pub count: usize,
    pub mean: Vec<f64>,
    pub variance: Vec<f64>,
}

impl CorpusStats {
    /// Accumulates statistics over every feature row of every sequence.
    pub fn estimate<'a>(seqs: impl IntoIterator<Item = &'a FeatureSequence>, fingerprint: impl Into<String>) -> Result<Self> {
        let mut count = 0usize;
        let mut sum: Vec<f64> = Vec::new();
        let mut sum_sq: Vec<f64> = Vec::new();
        for s in seqs {
            if sum.is_empty() {
                sum = vec![0.0; s.dim()];
                sum_sq = vec![0.0; s.dim()];
            } else if s.dim() != sum.len() {
                return Err(Error::Dimension(format!("feature width {} after {}", s.dim(), sum.len())));
            }
            for r in 0..s.len() {
                for (k, &v) in s.row(r).iter().enumerate() {
                    sum[k] += v as f64;
                    sum_sq[k] += (v as f64).powi(2);
                }
                count += 1;
            }
        }
        if count == 0 {
            return Err(Error::InvalidArgument("no features to estimate statistics from".into()));
        }
        let n = count as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
        let variance = sum_sq.iter().zip(&mean).map(|(q, m)| (q / n - m * m).max(0.0)).collect();
        Ok(Self {
            version: CORPUS_STATS_VERSION,
            fingerprint: fingerprint.into(),
            count,
            mean,
            variance,
        })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let stats: Self = serde_json::from_str(s)?;
        if stats.version != CORPUS_STATS_VERSION {
            return Err(Error::InvalidArgument(format!("corpus stats version {}", stats.version)));
        }
        if stats.mean.len() != stats.variance.len() {
            return Err(Error::Dimension("mean and variance lengths differ".into()));
        }
        Ok(stats)
    }
}

/// Hex SHA-256 over arbitrary byte chunks; used for corpus fingerprints.
pub fn fingerprint<'a>(chunks: impl IntoIterator<Item = &'a [u8]>) -> String {
    let mut h = Sha256::new();
    for c in chunks {
        h.update(c);
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

/// Negative log-likelihood of one feature under the factorized Gaussian;
/// dimensions with zero variance are skipped.
pub fn feature_nll(x: &[f32], stats: &CorpusStats) -> f64 {
    x.iter()
        .zip(stats.mean.iter().zip(&stats.variance))
        .filter(|(_, (_, &v))| v > 0.0)
        .map(|(&x, (&m, &v))| 0.5 * ((2.0 * std::f64::consts::PI * v).ln() + (x as f64 - m).powi(2) / v))
        .sum()
}

/// Surprise-based weights: features that are unlikely under the corpus
/// statistics carry more information.
pub fn entropy_weights(features: &FeatureSequence, stats: &CorpusStats) -> Result<WeightVector> {
    if features.dim() != stats.dim() {
        return Err(Error::Dimension(format!("features of width {} against stats of width {}", features.dim(), stats.dim())));
    }
    let nll: Vec<f64> = (0..features.len()).map(|i| feature_nll(features.row(i), stats)).collect();
    WeightVector::normalized(&nll)
}

/// Average-pools a `map_h x map_w` map onto a `grid_h x grid_w` grid,
/// weighting each source cell by its overlap area with the target cell.
pub fn area_pool(map: &[f64], map_h: usize, map_w: usize, grid_h: usize, grid_w: usize) -> Vec<f64> {
    assert_eq!(map.len(), map_h * map_w, "map size");
    let overlap = |i: usize, n_src: usize, j: usize, n_dst: usize| {
        // Cell i of n_src and cell j of n_dst on the unit interval.
        let (a0, a1) = (i as f64 / n_src as f64, (i + 1) as f64 / n_src as f64);
        let (b0, b1) = (j as f64 / n_dst as f64, (j + 1) as f64 / n_dst as f64);
        (a1.min(b1) - a0.max(b0)).max(0.0)
    };
    let mut out = Vec::with_capacity(grid_h * grid_w);
    for gy in 0..grid_h {
        for gx in 0..grid_w {
            let (mut acc, mut area) = (0.0, 0.0);
            for my in 0..map_h {
                let oy = overlap(my, map_h, gy, grid_h);
                if oy == 0.0 {
                    continue;
                }
                for mx in 0..map_w {
                    let a = oy * overlap(mx, map_w, gx, grid_w);
                    acc += a * map[my * map_w + mx];
                    area += a;
                }
            }
            out.push(acc / area);
        }
    }
    out
}

/// Importance from the downstream model's last activation map, pooled onto
/// the patch grid.
pub fn task_weights(img: &Image, task: &TaskModel, patch_size: usize) -> Result<WeightVector> {
    if patch_size == 0 || img.height() % patch_size != 0 || img.width() % patch_size != 0 {
        return Err(Error::Dimension(format!("{}x{} image with {patch_size}px patches", img.height(), img.width())));
    }
    let (map, h, w) = task.activation_map(img)?;
    let pooled = area_pool(&map, h, w, img.height() / patch_size, img.width() / patch_size);
    WeightVector::normalized(&pooled)
}

/// Keeps every feature with `w >= mu`; if none qualifies, keeps the argmax.
pub fn select_threshold(w: &WeightVector, mu: f64) -> Result<MaskBitmap> {
    if !(0.0..=1.0).contains(&mu) {
        return Err(Error::InvalidArgument(format!("threshold {mu} outside [0, 1]")));
    }
    let mut bits: Vec<bool> = w.as_slice().iter().map(|&x| x >= mu).collect();
    if !bits.iter().any(|&b| b) {
        bits[w.argmax()] = true;
    }
    MaskBitmap::new(bits)
}

/// Keeps exactly the `count` largest weights, lower index first on ties.
pub fn select_topk(w: &WeightVector, count: usize) -> Result<MaskBitmap> {
    if count == 0 || count > w.len() {
        return Err(Error::InvalidArgument(format!("top-{count} of {} features", w.len())));
    }
    let mut order: Vec<usize> = (0..w.len()).collect();
    let ws = w.as_slice();
    order.sort_by(|&a, &b| ws[b].total_cmp(&ws[a]).then(a.cmp(&b)));
    let kept = &order[..count];
    MaskBitmap::from_indices(w.len(), kept)
}

/// Outcome of [`rate_match`].
#[derive(Clone, Debug, PartialEq)]
pub struct RateMatch {
    pub bitmap: MaskBitmap,
    pub mu: f64,
    /// Number of times the threshold was raised.
    pub steps: usize,
}

/// Raises the threshold from `mu0` by `step` until the kept features fit in
/// `budget_symbols`. Thresholds are `mu0 + k * step`, rounded to 12 decimals
/// so that grid values compare exactly. Past `mu = 1` only the argmax is kept.
pub fn rate_match(w: &WeightVector, budget_symbols: usize, symbols_per_feature: usize, mu0: f64, step: f64) -> Result<RateMatch> {
    if symbols_per_feature == 0 || budget_symbols < symbols_per_feature {
        return Err(Error::InfeasibleBudget {
            budget: budget_symbols,
            per_feature: symbols_per_feature,
        });
    }
    if !(0.0..=1.0).contains(&mu0) || !(step > 0.0 && step.is_finite()) {
        return Err(Error::InvalidArgument(format!("rate matching from {mu0} in steps of {step}")));
    }
    let mut k = 0usize;
    loop {
        let mu = ((mu0 + k as f64 * step) * 1e12).round() / 1e12;
        if mu > 1.0 {
            let bitmap = MaskBitmap::from_indices(w.len(), &[w.argmax()])?;
            return Ok(RateMatch { bitmap, mu, steps: k });
        }
        let bitmap = select_threshold(w, mu)?;
        if bitmap.popcount() * symbols_per_feature <= budget_symbols {
            return Ok(RateMatch { bitmap, mu, steps: k });
        }
        k += 1;
    }
}
