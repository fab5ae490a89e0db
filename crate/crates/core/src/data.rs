//! Image datasets: the CIFAR binary record format, a synthetic stand-in,
//! normalisation, augmentation and minibatching.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng as StreamRng;
use crate::tensor::Tensor;

pub const CHANNELS: usize = 3;
pub const CIFAR_SIDE: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CifarFormat {
    Cifar10,
    Cifar100,
}

impl CifarFormat {
    pub fn label_bytes(self) -> usize {
        match self {
            CifarFormat::Cifar10 => 1,
            CifarFormat::Cifar100 => 2,
        }
    }

    pub fn n_classes(self) -> usize {
        match self {
            CifarFormat::Cifar10 => 10,
            CifarFormat::Cifar100 => 100,
        }
    }

    pub fn record_len(self, side: usize) -> usize {
        self.label_bytes() + CHANNELS * side * side
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Validation,
}

/// Byte images in CHW order, one label per image.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledImageSet {
    pub pixels: Vec<u8>,
    pub labels: Vec<usize>,
    pub n_classes: usize,
    pub side: usize,
    pub split: Split,
}

impl LabeledImageSet {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_len(&self) -> usize {
        CHANNELS * self.side * self.side
    }

    pub fn image(&self, i: usize) -> &[u8] {
        let n = self.image_len();
        &self.pixels[i * n..(i + 1) * n]
    }

    pub fn class_histogram(&self) -> Vec<usize> {
        let mut h = vec![0; self.n_classes];
        for &l in &self.labels {
            h[l] += 1;
        }
        h
    }
}

/// Reads CIFAR records of `side`×`side` images (32 for the real datasets).
/// For CIFAR-100 the fine label is used.
pub fn load_records(
    path: &Path,
    format: CifarFormat,
    side: usize,
    split: Split,
) -> Result<LabeledImageSet> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_records(&bytes, format, side, split)
}

pub fn load_cifar_records(
    path: &Path,
    format: CifarFormat,
    split: Split,
) -> Result<LabeledImageSet> {
    load_records(path, format, CIFAR_SIDE, split)
}

pub fn parse_records(
    bytes: &[u8],
    format: CifarFormat,
    side: usize,
    split: Split,
) -> Result<LabeledImageSet> {
    let rec = format.record_len(side);
    if bytes.is_empty() || !bytes.len().is_multiple_of(rec) {
        return Err(Error::Format(format!(
            "{} bytes is not a whole number of {rec}-byte records",
            bytes.len()
        )));
    }
    let n = bytes.len() / rec;
    let n_classes = format.n_classes();
    let mut pixels = Vec::with_capacity(n * (rec - format.label_bytes()));
    let mut labels = Vec::with_capacity(n);
    for (i, r) in bytes.chunks_exact(rec).enumerate() {
        let label = r[format.label_bytes() - 1] as usize;
        if label >= n_classes {
            return Err(Error::Format(format!(
                "record {i} has label {label}, expected < {n_classes}"
            )));
        }
        labels.push(label);
        pixels.extend_from_slice(&r[format.label_bytes()..]);
    }
    Ok(LabeledImageSet {
        pixels,
        labels,
        n_classes,
        side,
        split,
    })
}

/// Serialises a set in the record layout `load_records` reads. CIFAR-100
/// records get a zero coarse label.
pub fn encode_records(set: &LabeledImageSet, format: CifarFormat) -> Result<Vec<u8>> {
    if set.n_classes > format.n_classes() {
        return Err(Error::Format(format!(
            "{} classes do not fit the {format:?} label range",
            set.n_classes
        )));
    }
    let mut out = Vec::with_capacity(set.len() * format.record_len(set.side));
    for i in 0..set.len() {
        if format == CifarFormat::Cifar100 {
            out.push(0);
        }
        out.push(set.labels[i] as u8);
        out.extend_from_slice(set.image(i));
    }
    Ok(out)
}

/// Class-conditional images: a class colour plus a horizontally symmetric
/// pattern (band, edge columns, blob or ring), with Gaussian pixel noise of
/// standard deviation `noise` on the [0, 1] scale.
pub fn make_synthetic_dataset<R: Rng + ?Sized>(
    n_classes: usize,
    n_per_class: usize,
    side: usize,
    noise: f64,
    split: Split,
    rng: &mut R,
) -> Result<LabeledImageSet> {
    if n_classes == 0 || n_per_class == 0 || side == 0 {
        return Err(Error::Config(
            "synthetic dataset sizes must be at least 1".into(),
        ));
    }
    if n_classes > 256 {
        return Err(Error::Config("at most 256 synthetic classes".into()));
    }
    let normal = Normal::new(0.0, noise.max(0.0)).map_err(|e| Error::Config(e.to_string()))?;
    let prototypes: Vec<Vec<f64>> = (0..n_classes).map(|k| prototype(k, side)).collect();
    let mut pixels = Vec::with_capacity(n_classes * n_per_class * CHANNELS * side * side);
    let mut labels = Vec::with_capacity(n_classes * n_per_class);
    for _ in 0..n_per_class {
        for (k, proto) in prototypes.iter().enumerate() {
            labels.push(k);
            pixels.extend(proto.iter().map(|&p| {
                let v = if noise > 0.0 {
                    p + normal.sample(rng)
                } else {
                    p
                };
                (v.clamp(0.0, 1.0) * 255.0).round() as u8
            }));
        }
    }
    Ok(LabeledImageSet {
        pixels,
        labels,
        n_classes,
        side,
        split,
    })
}

fn prototype(k: usize, side: usize) -> Vec<f64> {
    const PHI: [f64; 3] = [0.618_033_988_75, 0.414_213_562_37, 0.732_050_807_57];
    let s = side as f64;
    let mid = (s - 1.0) / 2.0;
    let mut out = Vec::with_capacity(CHANNELS * side * side);
    for (c, phi) in PHI.iter().enumerate() {
        let base = 0.2 + 0.6 * ((k as f64 + 1.0) * phi * (c as f64 + 1.0)).fract();
        for y in 0..side {
            for x in 0..side {
                let (fy, fx) = (y as f64, x as f64);
                let dy = (fy - mid).abs() / s;
                let dx = (fx - mid).abs() / s;
                let on = match k % 4 {
                    0 => dy < 0.2,
                    1 => dx > 0.3,
                    2 => dx * dx + dy * dy < 0.06,
                    _ => dx.max(dy) > 0.35,
                };
                let sign = if (k / 4 + c).is_multiple_of(2) {
                    1.0
                } else {
                    -1.0
                };
                out.push(base + if on { 0.2 * sign } else { 0.0 });
            }
        }
    }
    out
}

/// Per-channel mean and standard deviation on the [0, 1] pixel scale.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: [f64; CHANNELS],
    pub std: [f64; CHANNELS],
}

impl Normalization {
    pub fn identity() -> Self {
        Normalization {
            mean: [0.0; CHANNELS],
            std: [1.0; CHANNELS],
        }
    }

    pub fn from_set(set: &LabeledImageSet) -> Self {
        let plane = set.side * set.side;
        let mut sum = [0.0f64; CHANNELS];
        let mut sq = [0.0f64; CHANNELS];
        for i in 0..set.len() {
            for (c, chunk) in set.image(i).chunks(plane).enumerate() {
                for &p in chunk {
                    let v = p as f64 / 255.0;
                    sum[c] += v;
                    sq[c] += v * v;
                }
            }
        }
        let n = (set.len() * plane).max(1) as f64;
        let mut mean = [0.0; CHANNELS];
        let mut std = [1.0; CHANNELS];
        for c in 0..CHANNELS {
            mean[c] = sum[c] / n;
            let var = (sq[c] / n - mean[c] * mean[c]).max(0.0);
            std[c] = if var > 1e-12 { var.sqrt() } else { 1.0 };
        }
        Normalization { mean, std }
    }

    pub fn apply(&self, image: &mut [f64], side: usize) {
        let plane = side * side;
        for (c, chunk) in image.chunks_mut(plane).enumerate() {
            for v in chunk {
                *v = (*v - self.mean[c]) / self.std[c];
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    pub pad: usize,
    pub crop: usize,
    pub flip_prob: f64,
    pub cutout: usize,
    pub normalization: Normalization,
}

impl AugmentConfig {
    /// Pad 4 / flip 0.5 / cutout 16 at 32 pixels, scaled to other sides.
    pub fn for_side(side: usize, normalization: Normalization) -> Self {
        AugmentConfig {
            pad: (side / 8).max(1),
            crop: side,
            flip_prob: 0.5,
            cutout: side / 2,
            normalization,
        }
    }

    pub fn check(&self, side: usize) -> Result<()> {
        if self.crop > side + 2 * self.pad {
            return Err(Error::Config(format!(
                "crop {} exceeds the padded size {}",
                self.crop,
                side + 2 * self.pad
            )));
        }
        if self.cutout > self.crop {
            return Err(Error::Config(format!(
                "cutout {} exceeds crop {}",
                self.cutout, self.crop
            )));
        }
        if !(0.0..=1.0).contains(&self.flip_prob) {
            return Err(Error::Config(format!(
                "flip_prob {} outside [0, 1]",
                self.flip_prob
            )));
        }
        Ok(())
    }
}

pub fn to_unit(image: &[u8]) -> Vec<f64> {
    image.iter().map(|&p| p as f64 / 255.0).collect()
}

/// Mirrors each row of a CHW image.
pub fn flip_horizontal(image: &mut [f64], side: usize) {
    for row in image.chunks_mut(side) {
        row.reverse();
    }
}

/// Zero-pad, random crop, random horizontal flip, CutOut, normalisation.
pub fn augment_image<R: Rng + ?Sized>(
    image: &[u8],
    side: usize,
    cfg: &AugmentConfig,
    rng: &mut R,
) -> Vec<f64> {
    let src = to_unit(image);
    let padded = side + 2 * cfg.pad;
    let crop = cfg.crop;
    let oy = rng.random_range(0..=padded - crop);
    let ox = rng.random_range(0..=padded - crop);
    let mut out = vec![0.0; CHANNELS * crop * crop];
    for c in 0..CHANNELS {
        for y in 0..crop {
            let py = oy + y;
            if py < cfg.pad || py >= cfg.pad + side {
                continue;
            }
            for x in 0..crop {
                let px = ox + x;
                if px < cfg.pad || px >= cfg.pad + side {
                    continue;
                }
                out[(c * crop + y) * crop + x] =
                    src[(c * side + py - cfg.pad) * side + px - cfg.pad];
            }
        }
    }
    if rng.random_bool(cfg.flip_prob) {
        flip_horizontal(&mut out, crop);
    }
    if cfg.cutout > 0 {
        cutout(&mut out, crop, cfg.cutout, rng);
    }
    cfg.normalization.apply(&mut out, crop);
    out
}

/// Zeroes a `size`×`size` square around a uniform centre, clipped at the
/// borders. A square as large as the image masks all of it.
fn cutout<R: Rng + ?Sized>(image: &mut [f64], side: usize, size: usize, rng: &mut R) {
    let cy = rng.random_range(0..side);
    let cx = rng.random_range(0..side);
    let (y0, y1, x0, x1) = if size >= side {
        (0, side, 0, side)
    } else {
        let half = size / 2;
        (
            cy.saturating_sub(half),
            (cy + size - half).min(side),
            cx.saturating_sub(half),
            (cx + size - half).min(side),
        )
    };
    for plane in image.chunks_mut(side * side) {
        for y in y0..y1 {
            plane[y * side + x0..y * side + x1].fill(0.0);
        }
    }
}

/// Index batches covering every example once; the last may be short.
pub fn minibatches(
    n: usize,
    batch_size: usize,
    shuffle: bool,
    rng: &mut StreamRng,
) -> Result<Vec<Vec<usize>>> {
    if n == 0 {
        return Err(Error::Config("cannot batch an empty set".into()));
    }
    if batch_size == 0 {
        return Err(Error::Config("batch_size must be at least 1".into()));
    }
    let mut order: Vec<usize> = (0..n).collect();
    if shuffle {
        order.shuffle(rng);
    }
    Ok(order.chunks(batch_size).map(<[usize]>::to_vec).collect())
}

/// Normalised images ready for a forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub images: Tensor,
    pub labels: Vec<usize>,
}

impl Batch {
    /// Augmented training batch.
    pub fn augmented(
        set: &LabeledImageSet,
        indices: &[usize],
        cfg: &AugmentConfig,
        rng: &mut StreamRng,
    ) -> Self {
        let mut data = Vec::with_capacity(indices.len() * CHANNELS * cfg.crop * cfg.crop);
        for &i in indices {
            data.extend(augment_image(set.image(i), set.side, cfg, rng));
        }
        Batch {
            images: Tensor::from_vec(&[indices.len(), CHANNELS, cfg.crop, cfg.crop], data).unwrap(),
            labels: indices.iter().map(|&i| set.labels[i]).collect(),
        }
    }

    /// Normalisation only.
    pub fn plain(set: &LabeledImageSet, indices: &[usize], norm: &Normalization) -> Self {
        let mut data = Vec::with_capacity(indices.len() * set.image_len());
        for &i in indices {
            let mut img = to_unit(set.image(i));
            norm.apply(&mut img, set.side);
            data.extend(img);
        }
        Batch {
            images: Tensor::from_vec(&[indices.len(), CHANNELS, set.side, set.side], data).unwrap(),
            labels: indices.iter().map(|&i| set.labels[i]).collect(),
        }
    }
}
