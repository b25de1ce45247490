use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::RngStream;
use crate::tensor::Tensor;

pub const DATASET_MAGIC: &[u8; 4] = b"DAKD";

/// Labelled images in `[0, 1]`, stored as one `[M, C, H, W]` tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    images: Tensor,
    labels: Vec<usize>,
    classes: usize,
}

impl Dataset {
    pub fn new(images: Tensor, labels: Vec<usize>, classes: usize) -> Result<Self> {
        let m = match images.shape() {
            [m, c, h, w] if *m >= 1 && *c >= 1 && *h >= 1 && *w >= 1 => *m,
            s => return Err(Error::Shape(format!("dataset images must be [M>=1, C, H, W], got {s:?}"))),
        };
        if labels.len() != m {
            return Err(Error::Shape(format!("{m} images but {} labels", labels.len())));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
            return Err(Error::Argument(format!("label {bad} outside [0, {classes})")));
        }
        if images.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Argument("pixel values must lie in [0, 1]".into()));
        }
        Ok(Self { images, labels, classes })
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

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn images(&self) -> &Tensor {
        &self.images
    }

    pub fn image_shape(&self) -> [usize; 3] {
        let s = self.images.shape();
        [s[1], s[2], s[3]]
    }

    pub fn image_len(&self) -> usize {
        self.image_shape().iter().product()
    }

    pub fn pixels(&self, i: usize) -> &[f64] {
        let n = self.image_len();
        &self.images.data()[i * n..(i + 1) * n]
    }

    pub fn image(&self, i: usize) -> Tensor {
        Tensor::new(self.image_shape().to_vec(), self.pixels(i).to_vec()).expect("shape matches")
    }

    /// Examples at the given indices, in that order.
    pub fn subset(&self, indices: &[usize]) -> Result<Dataset> {
        let n = self.image_len();
        let mut data = Vec::with_capacity(indices.len() * n);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.len() {
                return Err(Error::Argument(format!("index {i} out of range")));
            }
            data.extend_from_slice(self.pixels(i));
            labels.push(self.labels[i]);
        }
        let [c, h, w] = self.image_shape();
        Dataset::new(Tensor::new(vec![indices.len(), c, h, w], data)?, labels, self.classes)
    }

    /// Splits into the first `n` examples and the rest.
    /// Copy in which each label, with probability `fraction`, is redrawn
    /// uniformly over all classes (so it may stay the same).
    pub fn with_label_noise(&self, fraction: f64, seed: u64) -> Result<Dataset> {
        if !(0.0..=1.0).contains(&fraction) {
            return Err(Error::Config(format!("label noise {fraction} outside [0, 1]")));
        }
        let mut rng = RngStream::new(seed, 0);
        let labels = self
            .labels
            .iter()
            .map(|&y| if rng.bernoulli(fraction) { rng.int_range(0, self.classes - 1) } else { y })
            .collect();
        Ok(Dataset { images: self.images.clone(), labels, classes: self.classes })
    }

    pub fn split_at(&self, n: usize) -> Result<(Dataset, Dataset)> {
        let head: Vec<usize> = (0..n.min(self.len())).collect();
        let tail: Vec<usize> = (n.min(self.len())..self.len()).collect();
        Ok((self.subset(&head)?, self.subset(&tail)?))
    }

    /// Serializes to the `DAKD` layout: magic, u32 M/C/H/W, f32 pixels, u16 labels.
    pub fn to_bytes(&self) -> Vec<u8> {
        let s = self.images.shape();
        let mut out = Vec::with_capacity(20 + self.images.len() * 4 + self.len() * 2);
        out.extend_from_slice(DATASET_MAGIC);
        for &d in s {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in self.images.data() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
        for &y in &self.labels {
            out.extend_from_slice(&(y as u16).to_le_bytes());
        }
        out
    }

    /// Parses the `DAKD` layout. The class count is `max(label) + 1`.
    pub fn from_bytes(bytes: &[u8]) -> Result<Dataset> {
        if bytes.len() < 20 {
            return Err(Error::Truncated { expected: 20, actual: bytes.len() });
        }
        if &bytes[..4] != DATASET_MAGIC {
            return Err(Error::BadMagic {
                expected: "DAKD".into(),
                found: String::from_utf8_lossy(&bytes[..4]).into_owned(),
            });
        }
        let dim = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap()) as usize;
        let (m, c, h, w) = (dim(0), dim(1), dim(2), dim(3));
        if m == 0 || c == 0 || h == 0 || w == 0 {
            return Err(Error::Format { offset: 4, message: format!("empty dimension in {m}x{c}x{h}x{w}") });
        }
        let pixels = m * c * h * w;
        let expected = 20 + pixels * 4 + m * 2;
        if bytes.len() != expected {
            if bytes.len() < expected {
                return Err(Error::Truncated { expected, actual: bytes.len() });
            }
            return Err(Error::Format {
                offset: expected,
                message: format!("{} trailing bytes", bytes.len() - expected),
            });
        }
        let mut data = Vec::with_capacity(pixels);
        for i in 0..pixels {
            let off = 20 + 4 * i;
            let v = f32::from_le_bytes(bytes[off..off + 4].try_into().unwrap()) as f64;
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Format { offset: off, message: format!("pixel {v} outside [0, 1]") });
            }
            data.push(v);
        }
        let label_base = 20 + pixels * 4;
        let labels: Vec<usize> = (0..m)
            .map(|i| {
                let off = label_base + 2 * i;
                u16::from_le_bytes([bytes[off], bytes[off + 1]]) as usize
            })
            .collect();
        let classes = labels.iter().max().copied().unwrap_or(0) + 1;
        if classes < 2 {
            return Err(Error::Format { offset: label_base, message: "fewer than two classes".into() });
        }
        Dataset::new(Tensor::new(vec![m, c, h, w], data)?, labels, classes)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Dataset> {
        Dataset::from_bytes(&std::fs::read(path)?)
    }
}

/// Pixel values are stored as `f32` on disk; generators round through `f32`
/// so an in-memory dataset equals its file round-trip.
fn quantize(v: f64) -> f64 {
    (v.clamp(0.0, 1.0) as f32) as f64
}

/// Gaussian blobs: each class has a random mean image and samples scatter
/// around it with per-pixel standard deviation `spread`.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct BlobsSpec {
    pub n: usize,
    pub classes: usize,
    pub hw: usize,
    pub spread: f64,
}

impl BlobsSpec {
    pub fn generate(&self, seed: u64) -> Result<Dataset> {
        if self.n == 0 || self.classes < 2 || self.hw == 0 {
            return Err(Error::Config("blobs need n >= 1, classes >= 2, hw >= 1".into()));
        }
        let d = self.hw * self.hw;
        let mut rng = RngStream::new(seed, 0);
        let centers: Vec<Vec<f64>> = (0..self.classes)
            .map(|_| (0..d).map(|_| rng.uniform_range(0.2, 0.8)).collect())
            .collect();
        let mut data = Vec::with_capacity(self.n * d);
        let mut labels = Vec::with_capacity(self.n);
        for i in 0..self.n {
            let y = i % self.classes;
            labels.push(y);
            data.extend(centers[y].iter().map(|&c| quantize(c + self.spread * rng.normal())));
        }
        Dataset::new(Tensor::new(vec![self.n, 1, self.hw, self.hw], data)?, labels, self.classes)
    }
}

/// Concentric rings: class `c` is a bright ring whose radius grows with `c`,
/// drawn with a jittered center, thickness and brightness plus pixel noise.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct RingsSpec {
    pub n: usize,
    pub classes: usize,
    pub hw: usize,
    /// Standard deviation of the additive pixel noise.
    pub noise: f64,
    /// Ring peak height above a mid-grey background; 1 draws rings on black.
    pub contrast: f64,
    /// Maximum offset of the ring centre from the image centre, as a fraction of `hw`.
    pub jitter: f64,
}

impl RingsSpec {
    pub fn generate(&self, seed: u64) -> Result<Dataset> {
        if self.n == 0 || self.classes < 2 || self.hw < 4 {
            return Err(Error::Config("rings need n >= 1, classes >= 2, hw >= 4".into()));
        }
        if !(self.contrast > 0.0 && self.contrast <= 1.0) || !(self.noise >= 0.0) {
            return Err(Error::Config("rings need contrast in (0, 1] and noise >= 0".into()));
        }
        let background = 0.5 * (1.0 - self.contrast);
        let hw = self.hw as f64;
        let mut rng = RngStream::new(seed, 0);
        let mut data = Vec::with_capacity(self.n * self.hw * self.hw);
        let mut labels = Vec::with_capacity(self.n);
        let (r_min, r_max) = (0.12 * hw, 0.40 * hw);
        let gap = (r_max - r_min) / (self.classes - 1) as f64;
        for i in 0..self.n {
            let y = i % self.classes;
            labels.push(y);
            let radius = r_min + gap * y as f64 + rng.uniform_range(-0.2, 0.2) * gap;
            let cy = (hw - 1.0) / 2.0 + rng.uniform_range(-self.jitter, self.jitter) * hw;
            let cx = (hw - 1.0) / 2.0 + rng.uniform_range(-self.jitter, self.jitter) * hw;
            let width = rng.uniform_range(0.05, 0.08) * hw;
            let amp = rng.uniform_range(0.6, 1.0);
            for r in 0..self.hw {
                for c in 0..self.hw {
                    let dist = ((r as f64 - cy).powi(2) + (c as f64 - cx).powi(2)).sqrt();
                    let v = background + self.contrast * amp * (-(dist - radius).powi(2) / (2.0 * width * width)).exp();
                    data.push(quantize(v + self.noise * rng.normal()));
                }
            }
        }
        Dataset::new(Tensor::new(vec![self.n, 1, self.hw, self.hw], data)?, labels, self.classes)
    }
}
