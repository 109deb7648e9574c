//! In-memory image datasets, a seeded synthetic generator and batching.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

/// Labeled `H×W×3` byte images.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pixels: Vec<u8>,
    labels: Vec<usize>,
    classes: usize,
    hw: (usize, usize),
    split: Split,
}

impl Dataset {
    pub fn new(
        pixels: Vec<u8>,
        labels: Vec<usize>,
        classes: usize,
        hw: (usize, usize),
        split: Split,
    ) -> Result<Self> {
        let per = hw.0 * hw.1 * 3;
        if per == 0 || pixels.len() != labels.len() * per {
            return Err(Error::Invalid(format!(
                "{} pixel bytes do not hold {} images of {}x{}x3",
                pixels.len(),
                labels.len(),
                hw.0,
                hw.1
            )));
        }
        if let Some(&label) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::LabelOutOfRange { label, classes });
        }
        Ok(Dataset {
            pixels,
            labels,
            classes,
            hw,
            split,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn hw(&self) -> (usize, usize) {
        self.hw
    }

    pub fn split(&self) -> Split {
        self.split
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    /// Raw `H×W×3` bytes of image `i`.
    pub fn image(&self, i: usize) -> &[u8] {
        let per = self.hw.0 * self.hw.1 * 3;
        &self.pixels[i * per..(i + 1) * per]
    }

    /// First `n` samples (all of them when `n ≥ len`).
    pub fn take(&self, n: usize) -> Dataset {
        let n = n.min(self.len());
        let per = self.hw.0 * self.hw.1 * 3;
        Dataset {
            pixels: self.pixels[..n * per].to_vec(),
            labels: self.labels[..n].to_vec(),
            classes: self.classes,
            hw: self.hw,
            split: self.split,
        }
    }

    /// Image `i` as raw-range floats `[H, W, 3]` in `0..=255`.
    pub fn raw_image<T: Real>(&self, i: usize) -> Tensor<T> {
        let data = self
            .image(i)
            .iter()
            .map(|&b| T::from_f64(b as f64))
            .collect();
        Tensor::from_parts(
            crate::tensor::Shape::new(&[self.hw.0, self.hw.1, 3]).expect("nonzero geometry"),
            data,
        )
    }
}

/// Per-channel `(x / 255 − mean) / std`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Normalization {
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl Default for Normalization {
    fn default() -> Self {
        Normalization {
            mean: [0.5; 3],
            std: [0.5; 3],
        }
    }
}

impl Normalization {
    pub fn apply(&self, value: f64, channel: usize) -> f64 {
        (value / 255.0 - self.mean[channel]) / self.std[channel]
    }

    /// Normalizes a raw-range `[H, W, 3]` (or `[B, H, W, 3]`) tensor.
    pub fn tensor<T: Real>(&self, raw: &Tensor<T>) -> Tensor<T> {
        let data = raw
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| T::from_f64(self.apply(v.to_f64(), i % 3)))
            .collect();
        Tensor::from_parts(raw.shape().clone(), data)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Motif {
    Square,
    Disk,
    Stripes,
}

fn class_color(class: usize, classes: usize) -> [f64; 3] {
    // HSV hue wheel at saturation 0.85, value 0.95.
    let hue = class as f64 / classes as f64 * 6.0;
    let sector = libm::floor(hue) as usize % 6;
    let f = hue - libm::floor(hue);
    let (v, s) = (0.95 * 255.0, 0.85);
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match sector {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

/// Seeded synthetic classification set: each class is a colored motif
/// (filled square, disk or stripes) at a class-dependent position, with
/// per-pixel Gaussian noise and ±1 pixel jitter. Labels go round-robin.
pub fn synth_dataset(seed: u64, n: usize, classes: usize, hw: (usize, usize)) -> Result<Dataset> {
    if classes < 2 {
        return Err(Error::InvalidConfig(
            "synthetic dataset needs at least 2 classes".into(),
        ));
    }
    if hw.0 < 4 || hw.1 < 4 {
        return Err(Error::InvalidConfig(
            "synthetic images must be at least 4x4".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, 12.0).map_err(|e| Error::Invalid(format!("{e}")))?;
    let (h, w) = hw;
    let size = (h.min(w) / 2).max(2) as f64;
    let mut pixels = Vec::with_capacity(n * h * w * 3);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let class = i % classes;
        let motif = [Motif::Square, Motif::Disk, Motif::Stripes][class % 3];
        let color = class_color(class, classes);
        let slot = (class / 3) % 4;
        let cy = if slot / 2 == 0 {
            h as f64 * 0.3
        } else {
            h as f64 * 0.7
        };
        let cx = if slot.is_multiple_of(2) {
            w as f64 * 0.3
        } else {
            w as f64 * 0.7
        };
        let cy = cy + rng.random_range(-1i32..=1) as f64;
        let cx = cx + rng.random_range(-1i32..=1) as f64;
        let half = size / 2.0;
        for y in 0..h {
            for x in 0..w {
                let (dy, dx) = (y as f64 + 0.5 - cy, x as f64 + 0.5 - cx);
                let inside = match motif {
                    Motif::Square => dy.abs() <= half && dx.abs() <= half,
                    Motif::Disk => dy * dy + dx * dx <= half * half,
                    Motif::Stripes => dy.abs() <= half && dx.abs() <= half && (y / 2) % 2 == 0,
                };
                for &tint in &color {
                    let base = if inside { tint } else { 40.0 };
                    let v: f64 = base + noise.sample(&mut rng);
                    pixels.push(v.clamp(0.0, 255.0) as u8);
                }
            }
        }
        labels.push(class);
    }
    Dataset::new(pixels, labels, classes, hw, Split::Train)
}

/// Normalized images and their labels.
#[derive(Debug, Clone)]
pub struct Batch<T> {
    /// `[B, H, W, 3]`
    pub images: Tensor<T>,
    pub labels: Vec<usize>,
    /// Dataset indices of the samples.
    pub indices: Vec<usize>,
}

/// Sample order of `epoch`: a seeded permutation of `0..len`.
pub fn epoch_order(len: usize, seed: u64, epoch: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch);
    let mut order: Vec<usize> = (0..len).collect();
    order.shuffle(&mut rng);
    order
}

/// One epoch of shuffled batches; the last partial batch is kept.
pub struct BatchIter<'a, T> {
    ds: &'a Dataset,
    order: Vec<usize>,
    pos: usize,
    batch_size: usize,
    norm: Normalization,
    augment: Option<ChaCha8Rng>,
    _elem: core::marker::PhantomData<T>,
}

impl<'a, T: Real> BatchIter<'a, T> {
    pub fn new(
        ds: &'a Dataset,
        batch_size: usize,
        seed: u64,
        epoch: u64,
        norm: Normalization,
    ) -> Result<Self> {
        if batch_size == 0 {
            return Err(Error::InvalidConfig("batch size must be positive".into()));
        }
        Ok(BatchIter {
            ds,
            order: epoch_order(ds.len(), seed, epoch),
            pos: 0,
            batch_size,
            norm,
            augment: None,
            _elem: core::marker::PhantomData,
        })
    }

    /// In-order iteration without shuffling (evaluation).
    pub fn sequential(ds: &'a Dataset, batch_size: usize, norm: Normalization) -> Result<Self> {
        let mut it = Self::new(ds, batch_size, 0, 0, norm)?;
        it.order = (0..ds.len()).collect();
        Ok(it)
    }

    /// Random horizontal flip and 4-pixel zero-pad random crop.
    pub fn with_augmentation(mut self, seed: u64, epoch: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xa5a5_a5a5_a5a5_a5a5);
        rng.set_stream(epoch);
        self.augment = Some(rng);
        self
    }
}

fn augment_image(src: &[u8], hw: (usize, usize), rng: &mut ChaCha8Rng) -> Vec<u8> {
    const PAD: i64 = 4;
    let (h, w) = (hw.0 as i64, hw.1 as i64);
    let flip = rng.random_bool(0.5);
    let oy = rng.random_range(-PAD..=PAD);
    let ox = rng.random_range(-PAD..=PAD);
    let mut out = vec![0u8; src.len()];
    for y in 0..h {
        for x in 0..w {
            let sy = y + oy;
            let sx0 = x + ox;
            let sx = if flip { w - 1 - sx0 } else { sx0 };
            if (0..h).contains(&sy) && (0..w).contains(&sx0) {
                let s = ((sy * w + sx) * 3) as usize;
                let d = ((y * w + x) * 3) as usize;
                out[d..d + 3].copy_from_slice(&src[s..s + 3]);
            }
        }
    }
    out
}

impl<T: Real> Iterator for BatchIter<'_, T> {
    type Item = Batch<T>;

    fn next(&mut self) -> Option<Batch<T>> {
        if self.pos >= self.order.len() {
            return None;
        }
        let end = (self.pos + self.batch_size).min(self.order.len());
        let indices = self.order[self.pos..end].to_vec();
        self.pos = end;
        let (h, w) = self.ds.hw();
        let mut data = Vec::with_capacity(indices.len() * h * w * 3);
        for &i in &indices {
            let bytes = match self.augment.as_mut() {
                Some(rng) => augment_image(self.ds.image(i), (h, w), rng),
                None => self.ds.image(i).to_vec(),
            };
            data.extend(
                bytes
                    .iter()
                    .enumerate()
                    .map(|(j, &b)| T::from_f64(self.norm.apply(b as f64, j % 3))),
            );
        }
        let images = Tensor::new(&[indices.len(), h, w, 3], data).ok()?;
        let labels = indices.iter().map(|&i| self.ds.label(i)).collect();
        Some(Batch {
            images,
            labels,
            indices,
        })
    }
}
