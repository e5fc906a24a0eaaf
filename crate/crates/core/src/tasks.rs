//! Synthetic labelled corpus, downstream classifier, and evaluation
//! metrics.
//!
//! Each image shows one coloured shape on a low-frequency grey texture.
//! Class `k` fixes the colour (`PALETTE[k]`) and the shape (`k % 5`); the
//! ground-truth object mask comes with every image.

use std::io::{Read, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autograd::{ConvDims, Graph, Var};
use crate::codec::{patchify, CodecModel, Image};
use crate::error::{Error, Result};
use crate::nn::Linear;
use crate::params::{AdamW, ParamId, ParamStore};
use crate::seed::derive_seed;
use crate::tensor::Tensor;

pub const IMAGE_SIZE: usize = 32;
pub const NUM_CLASSES: usize = 10;

/// Object colours by class.
pub const PALETTE: [[f32; 3]; NUM_CLASSES] = [
    [0.90, 0.10, 0.10],
    [0.10, 0.80, 0.15],
    [0.10, 0.20, 0.95],
    [0.95, 0.90, 0.10],
    [0.10, 0.90, 0.90],
    [0.90, 0.10, 0.90],
    [1.00, 0.55, 0.05],
    [1.00, 1.00, 1.00],
    [0.00, 0.00, 0.00],
    [1.00, 0.60, 0.80],
];

/// Allowed fraction of object pixels per image.
pub const COVERAGE_RANGE: (f64, f64) = (0.05, 0.40);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Shape {
    Square,
    Disc,
    Triangle,
    Cross,
    Diamond,
}

impl Shape {
    pub fn of_class(label: usize) -> Shape {
        [Shape::Square, Shape::Disc, Shape::Triangle, Shape::Cross, Shape::Diamond][label % 5]
    }

    /// Whether offset `(dx, dy)` from the centre lies inside a shape of
    /// half-extent `r`.
    fn contains(self, dx: f64, dy: f64, r: f64) -> bool {
        let (ax, ay) = (dx.abs(), dy.abs());
        match self {
            Shape::Square => ax <= r && ay <= r,
            Shape::Disc => dx * dx + dy * dy <= r * r,
            Shape::Triangle => ay <= r && ax <= (dy + r) / 2.0,
            Shape::Cross => (ax <= r && ay <= r / 3.0) || (ax <= r / 3.0 && ay <= r),
            Shape::Diamond => ax + ay <= r,
        }
    }
}

/// One image of the corpus with its label and object mask.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledImage {
    pub image: Image,
    pub label: usize,
    /// Row-major, `true` on object pixels.
    pub region_mask: Vec<bool>,
}

impl LabeledImage {
    pub fn coverage(&self) -> f64 {
        self.region_mask.iter().filter(|&&b| b).count() as f64 / self.region_mask.len() as f64
    }

    /// Per patch: whether at least half of its pixels are object pixels.
    pub fn object_patches(&self, patch_size: usize) -> Vec<bool> {
        let (h, w) = (self.image.height(), self.image.width());
        let mut out = Vec::with_capacity((h / patch_size) * (w / patch_size));
        for py in 0..h / patch_size {
            for px in 0..w / patch_size {
                let mut inside = 0;
                for y in 0..patch_size {
                    for x in 0..patch_size {
                        inside += self.region_mask[(py * patch_size + y) * w + px * patch_size + x] as usize;
                    }
                }
                out.push(2 * inside >= patch_size * patch_size);
            }
        }
        out
    }
}

/// Generates image `index` of the corpus identified by `seed`.
pub fn generate_image(seed: u64, index: u64) -> LabeledImage {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, index));
    let label = rng.random_range(0..NUM_CLASSES);
    let background = texture(&mut rng);
    let shape = Shape::of_class(label);
    let n = IMAGE_SIZE;
    let mask = loop {
        let r: f64 = rng.random_range(4.0..11.0);
        let cx: f64 = rng.random_range(r..n as f64 - r);
        let cy: f64 = rng.random_range(r..n as f64 - r);
        let mask: Vec<bool> = (0..n * n)
            .map(|i| shape.contains((i % n) as f64 + 0.5 - cx, (i / n) as f64 + 0.5 - cy, r))
            .collect();
        let cov = mask.iter().filter(|&&b| b).count() as f64 / (n * n) as f64;
        if (COVERAGE_RANGE.0..=COVERAGE_RANGE.1).contains(&cov) {
            break mask;
        }
    };
    let jitter: [f32; 3] = std::array::from_fn(|_| rng.random_range(-0.05..0.05));
    let color: [f32; 3] = std::array::from_fn(|c| PALETTE[label][c] + jitter[c]);
    let image = Image::from_fn(n, n, |y, x, c| if mask[y * n + x] { color[c] } else { background[(y * n + x) * 3 + c] });
    LabeledImage {
        image,
        label,
        region_mask: mask,
    }
}

/// Low-frequency grey field: a jittered 4x4 lattice, bilinearly upsampled,
/// with a slight per-channel tint.
fn texture<R: Rng>(rng: &mut R) -> Vec<f32> {
    const G: usize = 4;
    let level: f64 = rng.random_range(0.3..0.6);
    let lattice: Vec<f64> = (0..(G + 1) * (G + 1)).map(|_| level + rng.random_range(-0.1..0.1)).collect();
    let tint: [f64; 3] = std::array::from_fn(|_| rng.random_range(-0.03..0.03));
    let n = IMAGE_SIZE;
    let mut out = Vec::with_capacity(n * n * 3);
    for y in 0..n {
        for x in 0..n {
            let fy = (y as f64 + 0.5) / n as f64 * G as f64;
            let fx = (x as f64 + 0.5) / n as f64 * G as f64;
            let (iy, ix) = (fy.floor() as usize, fx.floor() as usize);
            let (ty, tx) = (fy - iy as f64, fx - ix as f64);
            let at = |a: usize, b: usize| lattice[a * (G + 1) + b];
            let v = at(iy, ix) * (1.0 - ty) * (1.0 - tx) + at(iy, ix + 1) * (1.0 - ty) * tx + at(iy + 1, ix) * ty * (1.0 - tx) + at(iy + 1, ix + 1) * ty * tx;
            for t in tint {
                out.push((v + t).clamp(0.0, 1.0) as f32);
            }
        }
    }
    out
}

/// `count` images starting at corpus index `start`.
pub fn generate_range(seed: u64, start: u64, count: usize) -> Vec<LabeledImage> {
    (0..count as u64).map(|i| generate_image(seed, start + i)).collect()
}

pub fn generate_dataset(count: usize, seed: u64) -> Vec<LabeledImage> {
    generate_range(seed, 0, count)
}

const DATASET_MAGIC: &[u8; 8] = b"SESCDATA";
const DATASET_VERSION: u16 = 1;

/// Writes a dataset cache: magic, version, generator seed, count, image
/// size, then per image the label, the pixels as f32 LE and the packed
/// mask, followed by a SHA-256 of everything before it.
pub fn write_dataset<W: Write>(mut out: W, seed: u64, data: &[LabeledImage]) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(DATASET_MAGIC);
    buf.extend_from_slice(&DATASET_VERSION.to_le_bytes());
    buf.extend_from_slice(&seed.to_le_bytes());
    buf.extend_from_slice(&(data.len() as u32).to_le_bytes());
    let (h, w) = data.first().map_or((0, 0), |d| (d.image.height(), d.image.width()));
    buf.extend_from_slice(&(h as u16).to_le_bytes());
    buf.extend_from_slice(&(w as u16).to_le_bytes());
    for d in data {
        if (d.image.height(), d.image.width()) != (h, w) {
            return Err(Error::Dimension("dataset images differ in size".into()));
        }
        buf.push(d.label as u8);
        for &p in d.image.pixels() {
            buf.extend_from_slice(&p.to_le_bytes());
        }
        let mut packed = vec![0u8; d.region_mask.len().div_ceil(8)];
        for (i, _) in d.region_mask.iter().enumerate().filter(|(_, &b)| b) {
            packed[i / 8] |= 0x80 >> (i % 8);
        }
        buf.extend(packed);
    }
    let digest = Sha256::digest(&buf);
    buf.extend_from_slice(&digest);
    out.write_all(&buf)?;
    Ok(())
}

/// Reads a cache written by [`write_dataset`]; returns the generator seed
/// and the images.
pub fn read_dataset<R: Read>(mut input: R) -> Result<(u64, Vec<LabeledImage>)> {
    let mut buf = Vec::new();
    input.read_to_end(&mut buf)?;
    let bad = |m: &str| Error::InvalidArgument(format!("dataset cache: {m}"));
    if buf.len() < 26 + 32 || &buf[..8] != DATASET_MAGIC {
        return Err(bad("bad magic or truncated"));
    }
    let (body, digest) = buf.split_at(buf.len() - 32);
    if Sha256::digest(body).as_slice() != digest {
        return Err(bad("digest mismatch"));
    }
    if u16::from_le_bytes([body[8], body[9]]) != DATASET_VERSION {
        return Err(bad("unsupported version"));
    }
    let seed = u64::from_le_bytes(body[10..18].try_into().unwrap());
    let count = u32::from_le_bytes(body[18..22].try_into().unwrap()) as usize;
    let h = u16::from_le_bytes([body[22], body[23]]) as usize;
    let w = u16::from_le_bytes([body[24], body[25]]) as usize;
    let record = 1 + h * w * 12 + (h * w).div_ceil(8);
    if body.len() != 26 + count * record {
        return Err(bad("length does not match header"));
    }
    let mut out = Vec::with_capacity(count);
    for rec in body[26..].chunks_exact(record) {
        let label = rec[0] as usize;
        let pixels = rec[1..1 + h * w * 12].chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        let packed = &rec[1 + h * w * 12..];
        let region_mask = (0..h * w).map(|i| packed[i / 8] & (0x80 >> (i % 8)) != 0).collect();
        out.push(LabeledImage {
            image: Image::new(h, w, pixels)?,
            label,
            region_mask,
        });
    }
    Ok((seed, out))
}

/// Channel widths of the three convolution stages.
const WIDTHS: [usize; 3] = [16, 32, 32];

#[derive(Clone, Copy, Debug, PartialEq)]
struct TaskLayout {
    convs: [(ParamId, ParamId); 3],
    head: Linear,
}

/// Small CNN classifier: three 3x3 convolutions with ReLU (the first two
/// followed by 2x2 max pooling), global average pooling and a linear head.
/// The last ReLU map (8x8 for 32x32 input) is the activation map used for
/// task-driven weights.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskModel {
    store: ParamStore<f32>,
    layout: TaskLayout,
    height: usize,
    width: usize,
}

impl TaskModel {
    pub fn new(height: usize, width: usize, seed: u64) -> Result<Self> {
        if height % 4 != 0 || width % 4 != 0 || height == 0 || width == 0 {
            return Err(Error::Dimension(format!("task model needs sizes divisible by 4, got {height}x{width}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let mut cin = 3;
        let convs = std::array::from_fn(|i| {
            let cout = WIDTHS[i];
            let w = store.add_normal(format!("task.conv{i}.weight"), 9 * cin, cout, (2.0 / (9 * cin) as f64).sqrt(), &mut rng);
            let b = store.add(format!("task.conv{i}.bias"), Tensor::zeros(1, cout));
            cin = cout;
            (w, b)
        });
        let head = Linear::new(&mut store, "task.head", WIDTHS[2], NUM_CLASSES, &mut rng);
        Ok(Self {
            store,
            layout: TaskLayout { convs, head },
            height,
            width,
        })
    }

    pub fn from_params(height: usize, width: usize, params: ParamStore<f32>) -> Result<Self> {
        let mut m = Self::new(height, width, 0)?;
        if params.len() != m.store.len() {
            return Err(Error::Checkpoint(format!("expected {} task tensors, found {}", m.store.len(), params.len())));
        }
        for (id, p) in m.store.iter() {
            if params.find(&p.name) != Some(id) || params.get(id).shape() != p.value.shape() {
                return Err(Error::Checkpoint(format!("task parameter {} missing or malformed", p.name)));
            }
        }
        m.store = params;
        Ok(m)
    }

    pub fn params(&self) -> &ParamStore<f32> {
        &self.store
    }

    pub fn image_size(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    /// Activation-map side lengths.
    pub fn map_size(&self) -> (usize, usize) {
        (self.height / 4, self.width / 4)
    }

    /// Builds the forward pass for a batch of NHWC rows; returns the logits
    /// `[batch, classes]` and the last activation map `[batch * h/4 * w/4, c]`.
    pub fn forward(&self, g: &mut Graph<'_, f32>, x: Var, batch: usize) -> (Var, Var) {
        let (mut h, mut w, mut cin) = (self.height, self.width, 3);
        let mut x = x;
        for (i, &(wid, bid)) in self.layout.convs.iter().enumerate() {
            let dims = ConvDims {
                batch,
                height: h,
                width: w,
                in_channels: cin,
                out_channels: WIDTHS[i],
                kernel: 3,
            };
            let (wv, bv) = (g.param(wid), g.param(bid));
            x = g.conv2d(x, wv, bv, dims);
            x = g.relu(x);
            if i < 2 {
                x = g.max_pool2(x, batch, h, w);
                h /= 2;
                w /= 2;
            }
            cin = WIDTHS[i];
        }
        let pooled = g.global_avg_pool(x, batch, h * w);
        (self.layout.head.forward(g, pooled), x)
    }

    fn check(&self, img: &Image) -> Result<()> {
        if (img.height(), img.width()) != (self.height, self.width) {
            return Err(Error::Dimension(format!(
                "task model takes {}x{} images, got {}x{}",
                self.height,
                self.width,
                img.height(),
                img.width()
            )));
        }
        Ok(())
    }

    fn batch_input(&self, imgs: &[&Image]) -> Result<Tensor<f32>> {
        let mut data = Vec::with_capacity(imgs.len() * self.height * self.width * 3);
        for img in imgs {
            self.check(img)?;
            data.extend_from_slice(img.pixels());
        }
        Ok(Tensor::from_vec(imgs.len() * self.height * self.width, 3, data))
    }

    /// Class scores for each image.
    pub fn logits(&self, imgs: &[&Image]) -> Result<Vec<Vec<f32>>> {
        if imgs.is_empty() {
            return Ok(Vec::new());
        }
        let input = self.batch_input(imgs)?;
        let mut g = Graph::new(&self.store);
        let x = g.input(input);
        let (logits, _) = self.forward(&mut g, x, imgs.len());
        Ok(g.value(logits).data().chunks(NUM_CLASSES).map(|c| c.to_vec()).collect())
    }

    /// Argmax class per image (lowest class on ties).
    pub fn predict(&self, imgs: &[&Image]) -> Result<Vec<usize>> {
        Ok(self
            .logits(imgs)?
            .iter()
            .map(|l| l.iter().enumerate().fold(0, |best, (i, &v)| if v > l[best] { i } else { best }))
            .collect())
    }

    /// Channel-mean of the last ReLU map, row-major, with its size.
    pub fn activation_map(&self, img: &Image) -> Result<(Vec<f64>, usize, usize)> {
        let input = self.batch_input(&[img])?;
        let mut g = Graph::new(&self.store);
        let x = g.input(input);
        let (_, act) = self.forward(&mut g, x, 1);
        let a = g.value(act);
        let map = (0..a.rows()).map(|r| a.row(r).iter().map(|&v| v.abs() as f64).sum::<f64>() / a.cols() as f64).collect();
        let (h, w) = self.map_size();
        Ok((map, h, w))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TaskTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    /// Add random blur and noise to training images so the classifier
    /// tolerates imperfect reconstructions.
    pub augment: bool,
    /// Clean held-out accuracy below this fails training.
    pub min_accuracy: f64,
    pub seed: u64,
}

impl Default for TaskTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 6,
            batch_size: 32,
            learning_rate: 3e-3,
            weight_decay: 1e-4,
            augment: true,
            min_accuracy: 0.95,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskTrainReport {
    pub epoch_loss: Vec<f64>,
    pub held_out_accuracy: f64,
}

/// Random 3x3 box blur and additive Gaussian noise.
fn augment<R: Rng>(img: &Image, rng: &mut R) -> Image {
    let blurred = if rng.random_bool(0.5) { box_blur(img) } else { img.clone() };
    let sigma: f64 = rng.random_range(0.0..0.08);
    let noise = Normal::new(0.0, sigma.max(1e-12)).unwrap();
    Image::from_fn(img.height(), img.width(), |y, x, c| blurred.get(y, x, c) + noise.sample(rng) as f32)
}

fn box_blur(img: &Image) -> Image {
    let (h, w) = (img.height() as isize, img.width() as isize);
    Image::from_fn(img.height(), img.width(), |y, x, c| {
        let (mut acc, mut n) = (0.0, 0.0);
        for dy in -1..=1 {
            for dx in -1..=1 {
                let (yy, xx) = (y as isize + dy, x as isize + dx);
                if (0..h).contains(&yy) && (0..w).contains(&xx) {
                    acc += img.get(yy as usize, xx as usize, c);
                    n += 1.0;
                }
            }
        }
        acc / n
    })
}

/// Trains the classifier with AdamW and cross-entropy, then checks the
/// clean held-out accuracy against `cfg.min_accuracy`.
pub fn train_task_model(train: &[LabeledImage], held_out: &[LabeledImage], cfg: &TaskTrainConfig) -> Result<(TaskModel, TaskTrainReport)> {
    let first = train.first().ok_or_else(|| Error::Training("empty training set".into()))?;
    let (h, w) = (first.image.height(), first.image.width());
    let mut model = TaskModel::new(h, w, derive_seed(cfg.seed, 0))?;
    let mut opt = AdamW::new(&model.store, cfg.weight_decay);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 1));
    let steps_per_epoch = train.len().div_ceil(cfg.batch_size);
    let total = (cfg.epochs * steps_per_epoch).max(1);
    let mut step = 0;
    let mut epoch_loss = Vec::with_capacity(cfg.epochs);
    let mut order: Vec<usize> = (0..train.len()).collect();
    for _ in 0..cfg.epochs {
        shuffle(&mut order, &mut rng);
        let mut loss_sum = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let imgs: Vec<Image> = chunk
                .iter()
                .map(|&i| if cfg.augment { augment(&train[i].image, &mut rng) } else { train[i].image.clone() })
                .collect();
            let refs: Vec<&Image> = imgs.iter().collect();
            let input = model.batch_input(&refs)?;
            let labels: Vec<usize> = chunk.iter().map(|&i| train[i].label).collect();
            let grads = {
                let mut g = Graph::new(&model.store);
                let x = g.input(input);
                let (logits, _) = model.forward(&mut g, x, chunk.len());
                let loss = g.cross_entropy(logits, labels);
                let l = g.value(loss).data()[0] as f64;
                if !l.is_finite() {
                    return Err(Error::Training("task loss diverged".into()));
                }
                loss_sum += l * chunk.len() as f64;
                g.backward(loss).into_params()
            };
            let lr = cosine_lr(cfg.learning_rate, step, total, steps_per_epoch.min(total / 10));
            opt.step(&mut model.store, &grads, lr);
            step += 1;
        }
        epoch_loss.push(loss_sum / train.len() as f64);
    }
    let imgs: Vec<&Image> = held_out.iter().map(|d| &d.image).collect();
    let labels: Vec<usize> = held_out.iter().map(|d| d.label).collect();
    let held_out_accuracy = task_metric(&model, &imgs, &labels)?;
    if held_out_accuracy < cfg.min_accuracy {
        return Err(Error::Training(format!(
            "held-out accuracy {held_out_accuracy:.4} below the floor {}",
            cfg.min_accuracy
        )));
    }
    Ok((
        model,
        TaskTrainReport {
            epoch_loss,
            held_out_accuracy,
        },
    ))
}

/// Fisher-Yates shuffle driven by `rng`.
pub fn shuffle<T, R: Rng>(xs: &mut [T], rng: &mut R) {
    for i in (1..xs.len()).rev() {
        let j = rng.random_range(0..=i);
        xs.swap(i, j);
    }
}

/// Linear warmup over `warmup` steps, then cosine decay to 5% of `peak`.
pub fn cosine_lr(peak: f64, step: usize, total: usize, warmup: usize) -> f64 {
    if step < warmup {
        return peak * (step + 1) as f64 / warmup as f64;
    }
    let t = (step - warmup) as f64 / (total - warmup).max(1) as f64;
    peak * (0.05 + 0.95 * 0.5 * (1.0 + (std::f64::consts::PI * t.min(1.0)).cos()))
}

/// Fraction of images classified as their label.
pub fn task_metric(model: &TaskModel, images: &[&Image], labels: &[usize]) -> Result<f64> {
    if images.len() != labels.len() {
        return Err(Error::Dimension(format!("{} images but {} labels", images.len(), labels.len())));
    }
    if images.is_empty() {
        return Err(Error::InvalidArgument("accuracy of an empty set".into()));
    }
    let mut correct = 0;
    for (chunk, lab) in images.chunks(64).zip(labels.chunks(64)) {
        let pred = model.predict(chunk)?;
        correct += pred.iter().zip(lab).filter(|(p, l)| p == l).count();
    }
    Ok(correct as f64 / images.len() as f64)
}

/// Mean-pooled encoder features of an image.
pub fn embedding(embed: &CodecModel<f32>, img: &Image) -> Result<Vec<f64>> {
    Ok(embedding_batch(embed, &[img])?.remove(0))
}

pub fn embedding_batch(embed: &CodecModel<f32>, imgs: &[&Image]) -> Result<Vec<Vec<f64>>> {
    let patches = imgs.iter().map(|i| patchify(i, embed.config().patch_size)).collect::<Result<Vec<_>>>()?;
    let refs: Vec<_> = patches.iter().collect();
    Ok(embed.encode_batch(&refs)?.iter().map(|f| f.mean_pool()).collect())
}

/// Cosine similarity; fails when either vector has zero norm.
pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Dimension(format!("cosine of lengths {} and {}", a.len(), b.len())));
    }
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::UndefinedSimilarity);
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

/// Cosine similarity of the mean-pooled features of two images under a
/// frozen encoder.
pub fn semantic_similarity(embed: &CodecModel<f32>, a: &Image, b: &Image) -> Result<f64> {
    let e = embedding_batch(embed, &[a, b])?;
    cosine(&e[0], &e[1])
}

/// Smallest `L` whose similarity is within `eps` of the value at the
/// largest `L`. The curve must cover `1..=L_tot` exactly once each.
pub fn find_l_opt(curve: &[(usize, f64)], eps: f64) -> Result<usize> {
    if !(eps >= 0.0) {
        return Err(Error::InvalidArgument(format!("eps {eps} must be non-negative")));
    }
    let mut sorted = curve.to_vec();
    sorted.sort_by_key(|p| p.0);
    if sorted.is_empty() || sorted.iter().enumerate().any(|(i, p)| p.0 != i + 1) {
        return Err(Error::InvalidArgument("curve must cover L = 1..L_tot once each".into()));
    }
    let target = sorted.last().unwrap().1 - eps;
    Ok(sorted.iter().find(|p| p.1 >= target).unwrap().0)
}

/// Ranks with ties sharing their average rank (1-based).
pub fn ranks(xs: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..xs.len()).collect();
    idx.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut out = vec![0.0; xs.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && xs[idx[j + 1]] == xs[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            out[k] = r;
        }
        i = j + 1;
    }
    out
}

/// Spearman rank correlation; `None` when either side is constant.
pub fn spearman(x: &[f64], y: &[f64]) -> Option<f64> {
    assert_eq!(x.len(), y.len(), "spearman needs paired samples");
    let (rx, ry) = (ranks(x), ranks(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum();
    if vx == 0.0 || vy == 0.0 {
        None
    } else {
        Some(cov / (vx * vy).sqrt())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generation_is_deterministic() {
        assert_eq!(generate_dataset(5, 7), generate_dataset(5, 7));
        assert_ne!(generate_dataset(5, 7), generate_dataset(5, 8));
        assert_eq!(generate_range(7, 3, 2), generate_dataset(5, 7)[3..].to_vec());
    }

    #[test]
    fn object_pixels_carry_class_colour() {
        for d in generate_dataset(20, 1) {
            let n = IMAGE_SIZE;
            let i = d.region_mask.iter().position(|&b| b).unwrap();
            for c in 0..3 {
                assert!((d.image.get(i / n, i % n, c) - PALETTE[d.label][c].clamp(0.0, 1.0)).abs() <= 0.05 + 1e-6);
            }
        }
    }

    #[test]
    fn object_patch_rule() {
        let mut d = generate_image(0, 0);
        d.region_mask = vec![false; 32 * 32];
        for y in 0..2 {
            for x in 0..4 {
                d.region_mask[y * 32 + x] = true;
            }
        }
        let p = d.object_patches(4);
        assert!(p[0]);
        assert!(p[1..].iter().all(|&b| !b));
    }

    #[test]
    fn dataset_cache_round_trip() {
        let data = generate_dataset(3, 11);
        let mut buf = Vec::new();
        write_dataset(&mut buf, 11, &data).unwrap();
        let (seed, back) = read_dataset(&buf[..]).unwrap();
        assert_eq!((seed, back), (11, data));
        buf[40] ^= 1;
        assert!(read_dataset(&buf[..]).is_err());
    }

    #[test]
    fn l_opt_examples() {
        let c = [(1, 0.5), (2, 0.9), (3, 0.91), (4, 0.91)];
        assert_eq!(find_l_opt(&c, 0.01).unwrap(), 2);
        let rising = [(1, 0.1), (2, 0.2), (3, 0.3)];
        assert_eq!(find_l_opt(&rising, 0.01).unwrap(), 3);
        let flat = [(1, 0.1), (2, 0.4), (3, 0.4), (4, 0.4)];
        assert_eq!(find_l_opt(&flat, 0.0).unwrap(), 2);
        assert!(find_l_opt(&[(1, 0.1), (3, 0.2)], 0.01).is_err());
    }

    #[test]
    fn cosine_cases() {
        assert!((cosine(&[1.0, 2.0], &[1.0, 2.0]).unwrap() - 1.0).abs() < 1e-12);
        assert!(matches!(cosine(&[0.0, 0.0], &[1.0, 2.0]), Err(Error::UndefinedSimilarity)));
    }

    #[test]
    fn spearman_cases() {
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[10.0, 20.0, 35.0]), Some(1.0));
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]), Some(-1.0));
        assert_eq!(ranks(&[5.0, 1.0, 5.0]), vec![2.5, 1.0, 2.5]);
        assert_eq!(spearman(&[1.0, 2.0], &[1.0, 1.0]), None);
    }

    #[test]
    fn untrained_model_is_stable() {
        let m = TaskModel::new(32, 32, 3).unwrap();
        let img = generate_image(2, 0).image;
        assert_eq!(m.logits(&[&img]).unwrap(), m.logits(&[&img]).unwrap());
        let (map, h, w) = m.activation_map(&img).unwrap();
        assert_eq!((map.len(), h, w), (64, 8, 8));
    }

    #[test]
    fn lr_schedule_shape() {
        assert!(cosine_lr(1.0, 0, 100, 10) < cosine_lr(1.0, 9, 100, 10));
        assert!((cosine_lr(1.0, 9, 100, 10) - 1.0).abs() < 1e-12);
        assert!((cosine_lr(1.0, 100, 100, 10) - 0.05).abs() < 1e-12);
    }
}
