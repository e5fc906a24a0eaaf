//! Masked-autoencoder semantic codec.
//!
//! Transmitter: image → patches → transformer encoder → one feature per
//! patch → (selection) → power-normalized complex symbols.
//! Receiver: symbols → features → full-length sequence with the learned
//! mask token in every unsent slot → transformer decoder → fully-connected
//! map back to pixels.

use std::ops::Range;

use num_complex::{Complex, Complex32};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::bitmap::MaskBitmap;
use crate::error::{Error, Result};
use crate::nn::{sincos_2d, LayerNorm, Linear, TransformerBlock};
use crate::params::ParamStore;
use crate::tensor::{Real, Tensor};

/// RGB image, row-major, channels interleaved; every value in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    pixels: Vec<f32>,
}

impl Image {
    pub fn new(height: usize, width: usize, pixels: Vec<f32>) -> Result<Self> {
        if pixels.len() != height * width * 3 {
            return Err(Error::Dimension(format!(
                "{} values for a {height}x{width}x3 image",
                pixels.len()
            )));
        }
        if let Some(v) = pixels.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::InvalidArgument(format!("pixel value {v} outside [0, 1]")));
        }
        Ok(Self { height, width, pixels })
    }

    /// Uniform image; `value` is clamped into `[0, 1]`.
    pub fn filled(height: usize, width: usize, value: f32) -> Self {
        Self {
            height,
            width,
            pixels: vec![value.clamp(0.0, 1.0); height * width * 3],
        }
    }

    /// Builds an image from a per-pixel function, clamping into `[0, 1]`.
    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize, usize) -> f32) -> Self {
        let mut pixels = Vec::with_capacity(height * width * 3);
        for y in 0..height {
            for x in 0..width {
                for c in 0..3 {
                    pixels.push(f(y, x, c).clamp(0.0, 1.0));
                }
            }
        }
        Self { height, width, pixels }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f32 {
        self.pixels[(y * self.width + x) * 3 + c]
    }

    /// Per-pixel mean squared error.
    pub fn mse(&self, other: &Image) -> f64 {
        assert_eq!((self.height, self.width), (other.height, other.width), "mse between different sizes");
        let sum: f64 = self
            .pixels
            .iter()
            .zip(&other.pixels)
            .map(|(&a, &b)| ((a - b) as f64).powi(2))
            .sum();
        sum / self.pixels.len() as f64
    }

    /// Peak signal-to-noise ratio in dB for unit peak value.
    pub fn psnr(&self, other: &Image) -> f64 {
        let mse = self.mse(other);
        if mse == 0.0 {
            f64::INFINITY
        } else {
            -10.0 * mse.log10()
        }
    }
}

/// Non-overlapping square patches in raster order, each flattened as
/// `(row, col, channel)`.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchSequence {
    patch_size: usize,
    grid_h: usize,
    grid_w: usize,
    patches: Tensor<f32>,
}

impl PatchSequence {
    pub fn new(patch_size: usize, grid_h: usize, grid_w: usize, patches: Tensor<f32>) -> Result<Self> {
        if patches.shape() != (grid_h * grid_w, 3 * patch_size * patch_size) {
            return Err(Error::Dimension(format!(
                "patch matrix {:?} does not fit a {grid_h}x{grid_w} grid of {patch_size}px patches",
                patches.shape()
            )));
        }
        Ok(Self {
            patch_size,
            grid_h,
            grid_w,
            patches,
        })
    }

    pub fn patch_size(&self) -> usize {
        self.patch_size
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.grid_h, self.grid_w)
    }

    /// Number of patches `l`.
    pub fn len(&self) -> usize {
        self.patches.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.patches.rows() == 0
    }

    pub fn patches(&self) -> &Tensor<f32> {
        &self.patches
    }

    /// Row-concatenation of several sequences as one `[batch * l, d_p]`
    /// tensor.
    pub fn stack<T: Real>(seqs: &[&PatchSequence]) -> Tensor<T> {
        let cols = seqs.first().map_or(0, |s| s.patches.cols());
        let rows: usize = seqs.iter().map(|s| s.len()).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for s in seqs {
            data.extend(s.patches.data().iter().map(|&v| T::lit(v as f64)));
        }
        Tensor::from_vec(rows, cols, data)
    }
}

pub fn patchify(img: &Image, patch_size: usize) -> Result<PatchSequence> {
    if patch_size == 0 || img.height % patch_size != 0 || img.width % patch_size != 0 {
        return Err(Error::Dimension(format!(
            "{}x{} image is not divisible into {patch_size}px patches",
            img.height, img.width
        )));
    }
    let (gh, gw) = (img.height / patch_size, img.width / patch_size);
    let dp = 3 * patch_size * patch_size;
    let mut data = Vec::with_capacity(gh * gw * dp);
    for py in 0..gh {
        for px in 0..gw {
            for y in 0..patch_size {
                let start = ((py * patch_size + y) * img.width + px * patch_size) * 3;
                data.extend_from_slice(&img.pixels[start..start + patch_size * 3]);
            }
        }
    }
    PatchSequence::new(patch_size, gh, gw, Tensor::from_vec(gh * gw, dp, data))
}

/// Inverse of [`patchify`]; also checks that every value lies in `[0, 1]`.
pub fn unpatchify(p: &PatchSequence, height: usize, width: usize) -> Result<Image> {
    let ps = p.patch_size;
    if p.len() * p.patches.cols() != height * width * 3 || height % ps != 0 || width % ps != 0 || (height / ps, width / ps) != (p.grid_h, p.grid_w) {
        return Err(Error::Dimension(format!(
            "{} patches of {ps}px do not tile a {height}x{width} image",
            p.len()
        )));
    }
    let mut pixels = vec![0.0f32; height * width * 3];
    for py in 0..p.grid_h {
        for px in 0..p.grid_w {
            let row = p.patches.row(py * p.grid_w + px);
            for y in 0..ps {
                let start = ((py * ps + y) * width + px * ps) * 3;
                pixels[start..start + ps * 3].copy_from_slice(&row[y * ps * 3..(y + 1) * ps * 3]);
            }
        }
    }
    Image::new(height, width, pixels)
}

/// One `d`-wide feature per patch, `[l, d]`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSequence {
    features: Tensor<f32>,
}

impl FeatureSequence {
    pub fn new(features: Tensor<f32>) -> Result<Self> {
        if !features.all_finite() {
            return Err(Error::InvalidArgument("feature sequence contains non-finite values".into()));
        }
        Ok(Self { features })
    }

    pub fn len(&self) -> usize {
        self.features.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.features.rows() == 0
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn features(&self) -> &Tensor<f32> {
        &self.features
    }

    pub fn row(&self, i: usize) -> &[f32] {
        self.features.row(i)
    }

    /// Rows flagged in `bitmap`, ascending, as an `[n, d]` matrix.
    pub fn select(&self, bitmap: &MaskBitmap) -> Result<Tensor<f32>> {
        if bitmap.len() != self.len() {
            return Err(Error::Dimension(format!("bitmap of length {} for {} features", bitmap.len(), self.len())));
        }
        let kept = bitmap.kept();
        let mut out = Tensor::zeros(kept.len(), self.dim());
        for (i, &j) in kept.iter().enumerate() {
            out.row_mut(i).copy_from_slice(self.features.row(j));
        }
        Ok(out)
    }

    /// Mean over the sequence, in double precision.
    pub fn mean_pool(&self) -> Vec<f64> {
        let mut acc = vec![0.0f64; self.dim()];
        for r in 0..self.len() {
            for (a, &v) in acc.iter_mut().zip(self.features.row(r)) {
                *a += v as f64;
            }
        }
        let n = self.len().max(1) as f64;
        acc.iter_mut().for_each(|a| *a /= n);
        acc
    }
}

/// Power-normalized channel symbols of the kept features of one image.
///
/// Feature `k` of the payload occupies symbols `k*c .. (k+1)*c`, built from
/// consecutive (real, imaginary) pairs of the feature vector.
#[derive(Clone, Debug, PartialEq)]
pub struct SymbolFrame {
    symbols: Vec<Complex32>,
    bitmap: MaskBitmap,
    symbols_per_feature: usize,
    scale: Option<f32>,
}

impl SymbolFrame {
    pub fn new(symbols: Vec<Complex32>, bitmap: MaskBitmap, symbols_per_feature: usize, scale: Option<f32>) -> Result<Self> {
        if symbols.len() != bitmap.popcount() * symbols_per_feature {
            return Err(Error::Dimension(format!(
                "{} symbols for {} features of {symbols_per_feature} symbols",
                symbols.len(),
                bitmap.popcount()
            )));
        }
        Ok(Self {
            symbols,
            bitmap,
            symbols_per_feature,
            scale,
        })
    }

    pub fn symbols(&self) -> &[Complex32] {
        &self.symbols
    }

    pub fn bitmap(&self) -> &MaskBitmap {
        &self.bitmap
    }

    /// Number of kept features `n`.
    pub fn kept(&self) -> usize {
        self.bitmap.popcount()
    }

    pub fn symbols_per_feature(&self) -> usize {
        self.symbols_per_feature
    }

    pub fn feature_dim(&self) -> usize {
        2 * self.symbols_per_feature
    }

    pub fn scale(&self) -> Option<f32> {
        self.scale
    }

    pub fn mean_power(&self) -> f64 {
        if self.symbols.is_empty() {
            return 0.0;
        }
        self.symbols.iter().map(|z| (z.re as f64).powi(2) + (z.im as f64).powi(2)).sum::<f64>() / self.symbols.len() as f64
    }

    pub(crate) fn with_symbols(&self, symbols: Vec<Complex32>) -> SymbolFrame {
        SymbolFrame {
            symbols,
            bitmap: self.bitmap.clone(),
            symbols_per_feature: self.symbols_per_feature,
            scale: self.scale,
        }
    }
}

/// Maps the kept `[n, d]` features to unit-power complex symbols.
///
/// The frame is scaled by `sqrt(n * c) / ||v||` (with `c = d / 2`), which
/// is stored in the frame for the receiver.
pub fn features_to_symbols(kept: &Tensor<f32>, bitmap: &MaskBitmap) -> Result<SymbolFrame> {
    let (n, d) = kept.shape();
    if n == 0 || d == 0 || d % 2 != 0 {
        return Err(Error::Dimension(format!("cannot map a {n}x{d} feature block to complex symbols")));
    }
    if bitmap.popcount() != n {
        return Err(Error::BitmapMismatch {
            bitmap: bitmap.popcount(),
            received: n,
        });
    }
    let c = d / 2;
    let norm = kept.data().iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt();
    if norm == 0.0 || !norm.is_finite() {
        return Err(Error::DegenerateFrame);
    }
    let scale = ((n * c) as f64).sqrt() / norm;
    let symbols = kept
        .data()
        .chunks_exact(2)
        .map(|p| Complex::new((p[0] as f64 * scale) as f32, (p[1] as f64 * scale) as f32))
        .collect();
    SymbolFrame::new(symbols, bitmap.clone(), c, Some(scale as f32))
}

/// Inverse of [`features_to_symbols`]: undoes the recorded scale.
pub fn symbols_to_features(frame: &SymbolFrame) -> Result<Tensor<f32>> {
    let scale = frame.scale.ok_or(Error::MissingScale)? as f64;
    if !(scale > 0.0 && scale.is_finite()) {
        return Err(Error::MissingScale);
    }
    let n = frame.kept();
    let d = frame.feature_dim();
    let mut data = Vec::with_capacity(n * d);
    for z in &frame.symbols {
        data.push((z.re as f64 / scale) as f32);
        data.push((z.im as f64 / scale) as f32);
    }
    Ok(Tensor::from_vec(n, d, data))
}

/// Architecture hyperparameters.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct CodecConfig {
    pub image_height: usize,
    pub image_width: usize,
    pub patch_size: usize,
    /// Feature width `d`; `d / 2` complex symbols per feature.
    pub dim: usize,
    pub encoder_depth: usize,
    pub decoder_depth: usize,
    pub heads: usize,
    pub mlp_hidden: usize,
}

impl Default for CodecConfig {
    fn default() -> Self {
        Self {
            image_height: 32,
            image_width: 32,
            patch_size: 4,
            dim: 64,
            encoder_depth: 4,
            decoder_depth: 2,
            heads: 4,
            mlp_hidden: 128,
        }
    }
}

impl CodecConfig {
    pub fn grid(&self) -> (usize, usize) {
        (self.image_height / self.patch_size, self.image_width / self.patch_size)
    }

    /// Features per image, `l`.
    pub fn seq_len(&self) -> usize {
        let (h, w) = self.grid();
        h * w
    }

    pub fn patch_dim(&self) -> usize {
        3 * self.patch_size * self.patch_size
    }

    pub fn symbols_per_feature(&self) -> usize {
        self.dim / 2
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.patch_size > 0
            && self.image_height % self.patch_size == 0
            && self.image_width % self.patch_size == 0
            && self.dim % 4 == 0
            && self.heads > 0
            && self.dim % self.heads == 0;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!("inconsistent codec config {self:?}")))
        }
    }
}

/// Provenance recorded next to the parameters in a checkpoint.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ModelMeta {
    pub training_seed: u64,
    pub validation_mse: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
struct Layout {
    patch_embed: Linear,
    encoder: Vec<TransformerBlock>,
    encoder_norm: LayerNorm,
    feature_head: Linear,
    mask_token: crate::params::ParamId,
    decoder_embed: Linear,
    decoder: Vec<TransformerBlock>,
    decoder_norm: LayerNorm,
    output: Linear,
}

impl Layout {
    fn build<T: Real, R: Rng>(cfg: &CodecConfig, store: &mut ParamStore<T>, rng: &mut R) -> Self {
        let d = cfg.dim;
        let patch_embed = Linear::new(store, "encoder.patch_embed", cfg.patch_dim(), d, rng);
        let encoder = (0..cfg.encoder_depth)
            .map(|i| TransformerBlock::new(store, &format!("encoder.block{i}"), d, cfg.heads, cfg.mlp_hidden, rng))
            .collect();
        let encoder_norm = LayerNorm::new(store, "encoder.norm", d);
        let feature_head = Linear::new(store, "encoder.feature_head", d, d, rng);
        let mask_token = store.add_normal("decoder.mask_token", 1, d, 0.02, rng);
        let decoder_embed = Linear::new(store, "decoder.embed", d, d, rng);
        let decoder = (0..cfg.decoder_depth)
            .map(|i| TransformerBlock::new(store, &format!("decoder.block{i}"), d, cfg.heads, cfg.mlp_hidden, rng))
            .collect();
        let decoder_norm = LayerNorm::new(store, "decoder.norm", d);
        let output = Linear::new(store, "decoder.output", d, cfg.patch_dim(), rng);
        Self {
            patch_embed,
            encoder,
            encoder_norm,
            feature_head,
            mask_token,
            decoder_embed,
            decoder,
            decoder_norm,
            output,
        }
    }
}

/// Encoder, decoder, learned mask token and output projection.
#[derive(Clone, Debug, PartialEq)]
pub struct CodecModel<T: Real = f32> {
    config: CodecConfig,
    store: ParamStore<T>,
    layout: Option<Layout>,
    positions: Tensor<T>,
    pub meta: ModelMeta,
}

/// Graph nodes produced by one training forward pass.
#[derive(Clone, Copy, Debug)]
pub struct TrainForward {
    pub features: Var,
    pub reconstruction: Var,
}

impl<T: Real> CodecModel<T> {
    /// Model with no parameters; every forward call fails until
    /// [`CodecModel::initialize`] is called.
    pub fn new(config: CodecConfig) -> Result<Self> {
        config.validate()?;
        let (gh, gw) = config.grid();
        Ok(Self {
            config,
            store: ParamStore::new(),
            layout: None,
            positions: sincos_2d(gh, gw, config.dim),
            meta: ModelMeta::default(),
        })
    }

    /// Random initialization from `seed`.
    pub fn initialize(&mut self, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        self.layout = Some(Layout::build(&self.config, &mut store, &mut rng));
        self.store = store;
        self.meta.training_seed = seed;
    }

    pub fn initialized(config: CodecConfig, seed: u64) -> Result<Self> {
        let mut m = Self::new(config)?;
        m.initialize(seed);
        Ok(m)
    }

    /// Rebuilds a model from saved parameters; names and shapes must match
    /// the architecture exactly.
    pub fn from_params(config: CodecConfig, params: ParamStore<T>, meta: ModelMeta) -> Result<Self> {
        let mut skeleton = Self::initialized(config, 0)?;
        if params.len() != skeleton.store.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} parameter tensors, found {}",
                skeleton.store.len(),
                params.len()
            )));
        }
        for (id, p) in skeleton.store.iter() {
            let src = params
                .find(&p.name)
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter {}", p.name)))?;
            if params.get(src).shape() != p.value.shape() {
                return Err(Error::Checkpoint(format!("parameter {} has the wrong shape", p.name)));
            }
            if src != id {
                return Err(Error::Checkpoint(format!("parameter {} out of order", p.name)));
            }
        }
        skeleton.store = params;
        skeleton.meta = meta;
        Ok(skeleton)
    }

    pub fn config(&self) -> &CodecConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }

    pub fn is_initialized(&self) -> bool {
        self.layout.is_some()
    }

    pub fn mask_token(&self) -> Result<&Tensor<T>> {
        Ok(self.store.get(self.layout()?.mask_token))
    }

    pub fn cast<U: Real>(&self) -> CodecModel<U> {
        CodecModel {
            config: self.config,
            store: self.store.cast(),
            layout: self.layout.clone(),
            positions: self.positions.cast(),
            meta: self.meta.clone(),
        }
    }

    fn layout(&self) -> Result<&Layout> {
        self.layout.as_ref().ok_or(Error::ModelNotInitialized)
    }

    /// Encoder over `[batch * l, d_p]` patches; returns `[batch * l, d]`.
    pub fn encode_graph(&self, g: &mut Graph<'_, T>, patches: Var, batch: usize) -> Result<Var> {
        let layout = self.layout()?;
        let l = self.config.seq_len();
        let x = layout.patch_embed.forward(g, patches);
        let pos = g.input(self.positions.clone());
        let mut x = g.add_rows(x, pos);
        for block in &layout.encoder {
            x = block.forward(g, x, batch, l);
        }
        let x = layout.encoder_norm.forward(g, x);
        Ok(layout.feature_head.forward(g, x))
    }

    /// Places received rows and mask tokens according to `bitmaps` (one per
    /// image), giving `[batch * l, d]`.
    pub fn place_graph(&self, g: &mut Graph<'_, T>, received: Var, bitmaps: &[MaskBitmap]) -> Result<Var> {
        let layout = self.layout()?;
        let mut slots = Vec::with_capacity(bitmaps.len() * self.config.seq_len());
        let mut offset = 0;
        for b in bitmaps {
            if b.len() != self.config.seq_len() {
                return Err(Error::Dimension(format!("bitmap of length {} for l = {}", b.len(), self.config.seq_len())));
            }
            slots.extend(b.slots(offset));
            offset += b.popcount();
        }
        if offset != g.value(received).rows() {
            return Err(Error::BitmapMismatch {
                bitmap: offset,
                received: g.value(received).rows(),
            });
        }
        let token = g.param(layout.mask_token);
        Ok(g.place(received, token, slots))
    }

    /// Decoder over a full `[batch * l, d]` sequence; returns patch-space
    /// predictions `[batch * l, d_p]` (not clamped).
    pub fn decode_graph(&self, g: &mut Graph<'_, T>, seq: Var, batch: usize) -> Result<Var> {
        let layout = self.layout()?;
        let l = self.config.seq_len();
        let x = layout.decoder_embed.forward(g, seq);
        let pos = g.input(self.positions.clone());
        let mut x = g.add_rows(x, pos);
        for block in &layout.decoder {
            x = block.forward(g, x, batch, l);
        }
        let x = layout.decoder_norm.forward(g, x);
        Ok(layout.output.forward(g, x))
    }

    /// Encode, keep the rows flagged in `bitmaps`, optionally push them
    /// through power normalization and a channel, refill with mask tokens
    /// and decode.
    pub fn forward_train(&self, g: &mut Graph<'_, T>, patches: &Tensor<T>, bitmaps: &[MaskBitmap]) -> Result<TrainForward> {
        self.forward_inner(g, patches, bitmaps, None)
    }

    /// [`CodecModel::forward_train`] with the kept features passing through
    /// `channel` between power normalization and its inverse. `channel`
    /// receives the normalized rows and one row range per image.
    pub fn forward_train_with_channel(
        &self,
        g: &mut Graph<'_, T>,
        patches: &Tensor<T>,
        bitmaps: &[MaskBitmap],
        channel: &mut dyn FnMut(&mut Graph<'_, T>, Var, &[Range<usize>]) -> Var,
    ) -> Result<TrainForward> {
        self.forward_inner(g, patches, bitmaps, Some(channel))
    }

    fn forward_inner(
        &self,
        g: &mut Graph<'_, T>,
        patches: &Tensor<T>,
        bitmaps: &[MaskBitmap],
        channel: Option<&mut dyn FnMut(&mut Graph<'_, T>, Var, &[Range<usize>]) -> Var>,
    ) -> Result<TrainForward> {
        let l = self.config.seq_len();
        let batch = bitmaps.len();
        if patches.shape() != (batch * l, self.config.patch_dim()) {
            return Err(Error::Dimension(format!(
                "patch batch {:?} for {batch} images of {l} patches",
                patches.shape()
            )));
        }
        let input = g.input(patches.clone());
        let features = self.encode_graph(g, input, batch)?;
        let mut idx = Vec::new();
        let mut frames = Vec::with_capacity(batch);
        for (b, bm) in bitmaps.iter().enumerate() {
            let start = idx.len();
            idx.extend(bm.kept().into_iter().map(|i| b * l + i));
            frames.push(start..idx.len());
        }
        let mut kept = g.gather_rows(features, idx);
        if let Some(channel) = channel {
            let scale = g.group_norm_scale(kept, frames.clone());
            let symbols = g.group_mul(kept, scale, frames.clone(), false);
            let received = channel(g, symbols, &frames);
            kept = g.group_mul(received, scale, frames.clone(), true);
        }
        let seq = self.place_graph(g, kept, bitmaps)?;
        let reconstruction = self.decode_graph(g, seq, batch)?;
        Ok(TrainForward { features, reconstruction })
    }
}

impl CodecModel<f32> {
    pub fn encode_features(&self, p: &PatchSequence) -> Result<FeatureSequence> {
        Ok(self.encode_batch(&[p])?.remove(0))
    }

    /// Deterministic batched encoder (evaluation mode).
    pub fn encode_batch(&self, ps: &[&PatchSequence]) -> Result<Vec<FeatureSequence>> {
        self.layout()?;
        let l = self.config.seq_len();
        for p in ps {
            if p.len() != l || p.patches.cols() != self.config.patch_dim() {
                return Err(Error::Dimension(format!(
                    "{} patches of width {} for a model expecting {l} x {}",
                    p.len(),
                    p.patches.cols(),
                    self.config.patch_dim()
                )));
            }
        }
        if ps.is_empty() {
            return Ok(Vec::new());
        }
        let mut g = Graph::new(&self.store);
        let input = g.input(PatchSequence::stack(ps));
        let out = self.encode_graph(&mut g, input, ps.len())?;
        let data = g.value(out);
        (0..ps.len())
            .map(|b| {
                let rows = data.data()[b * l * data.cols()..(b + 1) * l * data.cols()].to_vec();
                FeatureSequence::new(Tensor::from_vec(l, data.cols(), rows))
            })
            .collect()
    }

    /// Full-length sequence from the `n` received rows: slot `i` holds the
    /// next received row when `bitmap[i]` is set, the mask token otherwise.
    /// Positions are implicit in the slot index; the decoder re-attaches
    /// positional embeddings.
    pub fn reconstruct_sequence(&self, received: &Tensor<f32>, bitmap: &MaskBitmap) -> Result<FeatureSequence> {
        let token = self.mask_token()?;
        if bitmap.popcount() != received.rows() {
            return Err(Error::BitmapMismatch {
                bitmap: bitmap.popcount(),
                received: received.rows(),
            });
        }
        if received.rows() > 0 && received.cols() != self.config.dim {
            return Err(Error::Dimension(format!("received width {} for d = {}", received.cols(), self.config.dim)));
        }
        let mut out = Tensor::zeros(bitmap.len(), self.config.dim);
        for (i, slot) in bitmap.slots(0).into_iter().enumerate() {
            match slot {
                Some(j) => out.row_mut(i).copy_from_slice(received.row(j)),
                None => out.row_mut(i).copy_from_slice(token.row(0)),
            }
        }
        FeatureSequence::new(out)
    }

    pub fn decode_image(&self, seq: &FeatureSequence, height: usize, width: usize) -> Result<Image> {
        Ok(self.decode_batch(&[seq], height, width)?.remove(0))
    }

    /// Decoder plus output map, clamped to `[0, 1]`.
    pub fn decode_batch(&self, seqs: &[&FeatureSequence], height: usize, width: usize) -> Result<Vec<Image>> {
        self.layout()?;
        let l = self.config.seq_len();
        if (height, width) != (self.config.image_height, self.config.image_width) {
            return Err(Error::Dimension(format!(
                "model decodes {}x{} images, asked for {height}x{width}",
                self.config.image_height, self.config.image_width
            )));
        }
        for s in seqs {
            if s.len() != l || s.dim() != self.config.dim {
                return Err(Error::Dimension(format!("sequence {}x{} for l = {l}, d = {}", s.len(), s.dim(), self.config.dim)));
            }
        }
        if seqs.is_empty() {
            return Ok(Vec::new());
        }
        let mut data = Vec::with_capacity(seqs.len() * l * self.config.dim);
        for s in seqs {
            data.extend_from_slice(s.features.data());
        }
        let mut g = Graph::new(&self.store);
        let input = g.input(Tensor::from_vec(seqs.len() * l, self.config.dim, data));
        let out = self.decode_graph(&mut g, input, seqs.len())?;
        let pred = g.value(out);
        let (gh, gw) = self.config.grid();
        let dp = self.config.patch_dim();
        (0..seqs.len())
            .map(|b| {
                let rows: Vec<f32> = pred.data()[b * l * dp..(b + 1) * l * dp].iter().map(|v| v.clamp(0.0, 1.0)).collect();
                let ps = PatchSequence::new(self.config.patch_size, gh, gw, Tensor::from_vec(l, dp, rows))?;
                unpatchify(&ps, height, width)
            })
            .collect()
    }
}
