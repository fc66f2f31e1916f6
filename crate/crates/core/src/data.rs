//! Datasets: the CIFAR-10 binary record format and a synthetic
//! class-conditional image generator.

use std::f64::consts::PI;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CIFAR_SIDE: usize = 32;
pub const CIFAR_PIXELS: usize = 3 * CIFAR_SIDE * CIFAR_SIDE;
pub const CIFAR_RECORD: usize = 1 + CIFAR_PIXELS;

/// Images `(N, C, H, W)` with integer labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

impl Dataset {
    pub fn new(images: Tensor, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        let (n, _, _, _) = images.dims4()?;
        if n != labels.len() {
            return Err(Error::Dataset(format!(
                "{n} images but {} labels",
                labels.len()
            )));
        }
        if let Some(&l) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::Dataset(format!(
                "label {l} outside [0, {num_classes})"
            )));
        }
        Ok(Self {
            images,
            labels,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// `(C, H, W)` of one image.
    pub fn image_shape(&self) -> [usize; 3] {
        let s = self.images.shape();
        [s[1], s[2], s[3]]
    }

    /// Stacks the examples at `indices` into one batch.
    pub fn gather(&self, indices: &[usize]) -> Result<(Tensor, Vec<usize>)> {
        let [c, h, w] = self.image_shape();
        let per = c * h * w;
        let mut data = Vec::with_capacity(indices.len() * per);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.len() {
                return Err(Error::Dataset(format!(
                    "index {i} out of range for {} examples",
                    self.len()
                )));
            }
            data.extend_from_slice(&self.images.data()[i * per..(i + 1) * per]);
            labels.push(self.labels[i]);
        }
        Ok((Tensor::new(&[indices.len(), c, h, w], data)?, labels))
    }

    /// Examples `start..end` as a new dataset.
    pub fn slice(&self, start: usize, end: usize) -> Result<Self> {
        if start >= end || end > self.len() {
            return Err(Error::Dataset(format!(
                "bad range {start}..{end} of {}",
                self.len()
            )));
        }
        let (images, labels) = self.gather(&(start..end).collect::<Vec<_>>())?;
        Self::new(images, labels, self.num_classes)
    }
}

/// Parses `count` records of the CIFAR binary format into raw pixels and labels.
pub fn parse_cifar_records(
    bytes: &[u8],
    count: usize,
    num_classes: usize,
) -> Result<(Vec<u8>, Vec<usize>)> {
    if !bytes.len().is_multiple_of(CIFAR_RECORD) {
        return Err(Error::Dataset(format!(
            "file length {} is not a multiple of {CIFAR_RECORD}",
            bytes.len()
        )));
    }
    let available = bytes.len() / CIFAR_RECORD;
    if count > available {
        return Err(Error::Dataset(format!(
            "requested {count} records, file holds {available}"
        )));
    }
    let mut pixels = Vec::with_capacity(count * CIFAR_PIXELS);
    let mut labels = Vec::with_capacity(count);
    for rec in bytes.chunks_exact(CIFAR_RECORD).take(count) {
        let label = rec[0] as usize;
        if label >= num_classes {
            return Err(Error::Dataset(format!(
                "label {label} outside [0, {num_classes})"
            )));
        }
        labels.push(label);
        pixels.extend_from_slice(&rec[1..]);
    }
    Ok((pixels, labels))
}

/// Writes records in the CIFAR binary format: one label byte, then the
/// R, G and B planes of 1024 row-major bytes each.
pub fn write_cifar_records(w: &mut impl Write, labels: &[u8], pixels: &[u8]) -> Result<()> {
    if pixels.len() != labels.len() * CIFAR_PIXELS {
        return Err(Error::Dataset(
            "pixel buffer does not match label count".into(),
        ));
    }
    for (label, img) in labels.iter().zip(pixels.chunks_exact(CIFAR_PIXELS)) {
        w.write_all(&[*label])?;
        w.write_all(img)?;
    }
    Ok(())
}

/// Normalizes each channel to zero mean and unit variance over the whole
/// tensor. A constant channel is only centered.
pub fn normalize_per_channel(images: &mut Tensor) -> Result<()> {
    let (n, c, h, w) = images.dims4()?;
    let plane = h * w;
    let count = (n * plane) as f64;
    let data = images.data_mut();
    for ch in 0..c {
        let planes = || (0..n).map(move |i| (i * c + ch) * plane);
        let mut mean = 0.0;
        for s in planes() {
            mean += data[s..s + plane].iter().sum::<f64>();
        }
        mean /= count;
        let mut var = 0.0;
        for s in planes() {
            var += data[s..s + plane]
                .iter()
                .map(|v| (v - mean).powi(2))
                .sum::<f64>();
        }
        let std = (var / count).sqrt();
        let scale = if std > 0.0 { 1.0 / std } else { 1.0 };
        for s in planes() {
            for v in &mut data[s..s + plane] {
                *v = (*v - mean) * scale;
            }
        }
    }
    Ok(())
}

/// Loads the first `count` records of a CIFAR binary file, scales pixels to
/// [0, 1] and normalizes each channel over the loaded subset.
pub fn load_cifar_binary(path: &Path, count: usize, num_classes: usize) -> Result<Dataset> {
    let bytes = std::fs::read(path)?;
    let (pixels, labels) = parse_cifar_records(&bytes, count, num_classes)?;
    let data = pixels.iter().map(|&p| p as f64 / 255.0).collect();
    let mut images = Tensor::new(&[count, 3, CIFAR_SIDE, CIFAR_SIDE], data)?;
    normalize_per_channel(&mut images)?;
    Dataset::new(images, labels, num_classes)
}

fn default_image_size() -> usize {
    16
}

fn default_noise() -> f64 {
    2.0
}

fn default_jitter() -> f64 {
    0.35
}

/// Parameters of the synthetic generator.
///
/// Class `c` is a grating at orientation `c·π/C` with a class tint; each
/// example gets a random phase, frequency, contrast and orientation jitter
/// (radians) plus Gaussian pixel noise.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub count: usize,
    pub num_classes: usize,
    #[serde(default = "default_image_size")]
    pub image_size: usize,
    #[serde(default = "default_noise")]
    pub noise: f64,
    #[serde(default = "default_jitter")]
    pub orientation_jitter: f64,
}

impl SynthConfig {
    pub fn new(count: usize, num_classes: usize) -> Self {
        Self {
            count,
            num_classes,
            image_size: default_image_size(),
            noise: default_noise(),
            orientation_jitter: default_jitter(),
        }
    }
}

/// Deterministic synthetic dataset; labels are balanced (`i mod C`) then
/// shuffled, so class counts differ by at most one.
pub fn synth_dataset(cfg: &SynthConfig, seed: u64) -> Result<Dataset> {
    if cfg.num_classes == 0 || cfg.count == 0 || cfg.image_size == 0 {
        return Err(Error::Dataset(
            "synthetic dataset needs count, classes and size > 0".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut labels: Vec<usize> = (0..cfg.count).map(|i| i % cfg.num_classes).collect();
    labels.shuffle(&mut rng);
    let s = cfg.image_size;
    let mut data = Vec::with_capacity(cfg.count * 3 * s * s);
    for &label in &labels {
        let angle = label as f64 * PI / cfg.num_classes as f64
            + rng.gen_range(-1.0..=1.0) * cfg.orientation_jitter;
        let freq = rng.gen_range(1.5..3.0) * 2.0 * PI / s as f64;
        let phase = rng.gen_range(0.0..2.0 * PI);
        let contrast = rng.gen_range(0.6..1.0);
        let (sin, cos) = angle.sin_cos();
        let hue = label as f64 * 2.0 * PI / cfg.num_classes as f64;
        for ch in 0..3 {
            let tint = 0.3 * (hue + ch as f64 * 2.0 * PI / 3.0).cos();
            for y in 0..s {
                for x in 0..s {
                    let u = x as f64 * cos + y as f64 * sin;
                    let noise: f64 = rng.sample(StandardNormal);
                    data.push(contrast * (freq * u + phase).sin() + tint + cfg.noise * noise);
                }
            }
        }
    }
    let mut images = Tensor::new(&[cfg.count, 3, s, s], data)?;
    normalize_per_channel(&mut images)?;
    Dataset::new(images, labels, cfg.num_classes)
}
