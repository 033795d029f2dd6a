use std::fs;
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use rand::Rng as _;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::rng;

/// Channel-first image shape `(channels, height, width)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct ImageShape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl ImageShape {
    pub fn new(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
        }
    }

    pub fn numel(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }
}

/// Per-channel mean and standard deviation used to normalize model inputs.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ChannelStats {
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
}

impl ChannelStats {
    pub fn identity(channels: usize) -> Self {
        Self {
            mean: vec![0.0; channels],
            std: vec![1.0; channels],
        }
    }
}

/// Images in `[0, 1]` with integer class labels.
#[derive(Debug, Clone)]
pub struct LabeledDataset {
    shape: ImageShape,
    images: Vec<f32>,
    labels: Vec<usize>,
    class_names: Vec<String>,
}

impl LabeledDataset {
    pub fn new(shape: ImageShape, images: Vec<f32>, labels: Vec<usize>, class_names: Vec<String>) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::InvalidArgument("dataset must contain at least one sample".into()));
        }
        if images.len() != labels.len() * shape.numel() {
            return Err(Error::BadShape(format!(
                "{} pixels for {} images of shape {:?}",
                images.len(),
                labels.len(),
                shape
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= class_names.len()) {
            return Err(Error::InvalidArgument(format!(
                "label {bad} outside {} class names",
                class_names.len()
            )));
        }
        if images.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::InvalidArgument("pixel values must lie in [0, 1]".into()));
        }
        Ok(Self {
            shape,
            images,
            labels,
            class_names,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn shape(&self) -> ImageShape {
        self.shape
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn image(&self, index: usize) -> &[f32] {
        let n = self.shape.numel();
        &self.images[index * n..(index + 1) * n]
    }

    pub fn pixels(&self) -> &[f32] {
        &self.images
    }

    /// Indices of every sample whose label is in `classes`.
    pub fn indices_of_classes(&self, classes: &[usize]) -> Vec<usize> {
        self.labels
            .iter()
            .enumerate()
            .filter(|(_, l)| classes.contains(l))
            .map(|(i, _)| i)
            .collect()
    }

    /// Returns a copy whose labels are renamed through `mapping[old] = new`.
    ///
    /// `mapping` must be a permutation of `0..num_classes`.
    pub fn relabel(&self, mapping: &[usize]) -> Result<Self> {
        let k = self.num_classes();
        let mut seen = vec![false; k];
        if mapping.len() != k || mapping.iter().any(|&m| m >= k || std::mem::replace(&mut seen[m], true)) {
            return Err(Error::InvalidArgument("relabel mapping is not a permutation".into()));
        }
        let mut names = vec![String::new(); k];
        for (old, &new) in mapping.iter().enumerate() {
            names[new] = self.class_names[old].clone();
        }
        Ok(Self {
            shape: self.shape,
            images: self.images.clone(),
            labels: self.labels.iter().map(|&l| mapping[l]).collect(),
            class_names: names,
        })
    }

    pub fn channel_stats(&self) -> ChannelStats {
        let (c, h, w) = self.shape.dims();
        let plane = h * w;
        let mut sum = vec![0f64; c];
        let mut sq = vec![0f64; c];
        for img in self.images.chunks_exact(self.shape.numel()) {
            for ch in 0..c {
                for &p in &img[ch * plane..(ch + 1) * plane] {
                    sum[ch] += p as f64;
                    sq[ch] += (p as f64) * (p as f64);
                }
            }
        }
        let count = (self.len() * plane) as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / count).collect();
        let std = sq
            .iter()
            .zip(&mean)
            .map(|(s, m)| ((s / count - m * m).max(1e-12)).sqrt() as f32)
            .collect();
        ChannelStats {
            mean: mean.into_iter().map(|m| m as f32).collect(),
            std,
        }
    }

    /// Gathers `indices` into a `(B, C, H, W)` tensor normalized by `stats`.
    pub fn batch_tensor(&self, indices: &[usize], stats: &ChannelStats, dtype: DType, device: &Device) -> Result<Tensor> {
        let (c, h, w) = self.shape.dims();
        let plane = h * w;
        let mut out = Vec::with_capacity(indices.len() * self.shape.numel());
        for &i in indices {
            let img = self.image(i);
            for ch in 0..c {
                let (m, s) = (stats.mean[ch], stats.std[ch]);
                out.extend(img[ch * plane..(ch + 1) * plane].iter().map(|p| (p - m) / s));
            }
        }
        Ok(Tensor::from_vec(out, (indices.len(), c, h, w), device)?.to_dtype(dtype)?)
    }

    pub fn batch_labels(&self, indices: &[usize]) -> Vec<usize> {
        indices.iter().map(|&i| self.labels[i]).collect()
    }
}

/// Procedurally generated, class-separable images.
///
/// Each class owns a colour, a blob position and a stripe texture; samples add
/// positional jitter, random stripe phase and pixel noise. The class signatures
/// come from a fixed palette stream, so datasets drawn with different seeds
/// share class semantics and differ only in per-sample content.
pub fn synthetic_blobs_dataset(num_classes: usize, per_class: usize, shape: ImageShape, seed: u64) -> Result<LabeledDataset> {
    if num_classes < 2 {
        return Err(Error::InvalidArgument("synthetic blobs need at least two classes".into()));
    }
    if per_class == 0 || shape.numel() == 0 {
        return Err(Error::InvalidArgument("empty synthetic dataset".into()));
    }
    let signatures = class_signatures(num_classes, shape);
    let mut rng = rng::stream(seed, "blobs/samples");
    let noise = Normal::new(0.0f32, 0.06).expect("valid normal");
    let (c, h, w) = shape.dims();
    let mut images = Vec::with_capacity(num_classes * per_class * shape.numel());
    let mut labels = Vec::with_capacity(num_classes * per_class);
    for _ in 0..per_class {
        for (class, sig) in signatures.iter().enumerate() {
            let jx = rng.random_range(-1.0f32..1.0) * sig.jitter;
            let jy = rng.random_range(-1.0f32..1.0) * sig.jitter;
            let phase = rng.random_range(0.0f32..std::f32::consts::TAU);
            let brightness = rng.random_range(0.85f32..1.15);
            for ch in 0..c {
                for y in 0..h {
                    for x in 0..w {
                        let (fx, fy) = (x as f32 / w as f32, y as f32 / h as f32);
                        let dx = fx - (sig.cx + jx);
                        let dy = fy - (sig.cy + jy);
                        let blob = (-(dx * dx + dy * dy) / (2.0 * sig.radius * sig.radius)).exp();
                        let stripe = (sig.freq * (fx * sig.angle.cos() + fy * sig.angle.sin()) + phase).sin();
                        let base = 0.15 + 0.1 * sig.background[ch];
                        let v = base
                            + blob * sig.color[ch % sig.color.len()] * 0.75 * brightness
                            + 0.12 * stripe * sig.color[(ch + 1) % sig.color.len()]
                            + noise.sample(&mut rng);
                        images.push(v.clamp(0.0, 1.0));
                    }
                }
            }
            labels.push(class);
        }
    }
    let class_names = (0..num_classes).map(|i| format!("blob_{i}")).collect();
    LabeledDataset::new(shape, images, labels, class_names)
}

struct ClassSignature {
    color: [f32; 3],
    background: [f32; 3],
    cx: f32,
    cy: f32,
    radius: f32,
    jitter: f32,
    freq: f32,
    angle: f32,
}

fn class_signatures(num_classes: usize, shape: ImageShape) -> Vec<ClassSignature> {
    let mut rng = rng::stream(0x5eed_b10b, "blobs/palette");
    let grid = (num_classes as f32).sqrt().ceil() as usize;
    let pixel = 1.0 / shape.height.max(1) as f32;
    (0..num_classes)
        .map(|k| {
            let hue = k as f32 / num_classes as f32;
            let color = hsv_to_rgb(hue, 0.85, 1.0);
            let (gx, gy) = (k % grid, k / grid);
            ClassSignature {
                color,
                background: [rng.random(), rng.random(), rng.random()],
                cx: (gx as f32 + 0.5) / grid as f32,
                cy: (gy as f32 + 0.5) / grid as f32,
                radius: 0.12 + 0.05 * rng.random::<f32>(),
                jitter: 1.5 * pixel,
                freq: 6.0 + 10.0 * rng.random::<f32>(),
                angle: std::f32::consts::PI * k as f32 / num_classes as f32,
            }
        })
        .collect()
}

fn hsv_to_rgb(h: f32, s: f32, v: f32) -> [f32; 3] {
    let i = (h * 6.0).floor();
    let f = h * 6.0 - i;
    let p = v * (1.0 - s);
    let q = v * (1.0 - f * s);
    let t = v * (1.0 - (1.0 - f) * s);
    match (i as i32).rem_euclid(6) {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

/// Loads `<root>/<class_name>/<image files>` using `<root>/classes.txt` for
/// the class order (line index = class id). Images are resized to `shape`.
pub fn load_image_folder(root: &Path, shape: ImageShape) -> Result<LabeledDataset> {
    let manifest = fs::read_to_string(root.join("classes.txt"))?;
    let class_names: Vec<String> = manifest
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(str::to_string)
        .collect();
    if class_names.is_empty() {
        return Err(Error::InvalidArgument(format!("{} lists no classes", root.join("classes.txt").display())));
    }
    let mut images = Vec::new();
    let mut labels = Vec::new();
    for (class, name) in class_names.iter().enumerate() {
        let mut files: Vec<_> = fs::read_dir(root.join(name))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_file())
            .collect();
        files.sort();
        for file in files {
            let img = image::open(&file)?;
            let img = img
                .resize_exact(shape.width as u32, shape.height as u32, image::imageops::FilterType::Triangle)
                .to_rgb8();
            let plane = shape.height * shape.width;
            let mut chw = vec![0f32; shape.numel()];
            for (i, px) in img.pixels().enumerate() {
                for ch in 0..shape.channels {
                    chw[ch * plane + i] = px.0[ch.min(2)] as f32 / 255.0;
                }
            }
            images.extend(chw);
            labels.push(class);
        }
    }
    LabeledDataset::new(shape, images, labels, class_names)
}
