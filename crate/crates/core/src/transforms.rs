//! Gradient-shaping transforms: the diverse-input resize-and-pad and the
//! translation-invariant Gaussian smoothing of gradients.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::RngStream;
use crate::tensor::{nearest_source, Tensor};

/// Stochastic shrink-and-pad applied with probability `p`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DimSpec {
    pub p: f64,
    /// Smallest resize target as a fraction of the image side.
    pub min_scale: f64,
}

impl DimSpec {
    pub const DEFAULT_MIN_SCALE: f64 = 0.85;

    pub fn new(p: f64, min_scale: f64) -> Result<Self> {
        let spec = Self { p, min_scale };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.p) {
            return Err(Error::Config(format!("DIM probability {} outside [0, 1]", self.p)));
        }
        if !(self.min_scale > 0.0 && self.min_scale <= 1.0) {
            return Err(Error::Config(format!("DIM min scale {} outside (0, 1]", self.min_scale)));
        }
        Ok(())
    }

    /// Draws one transform for an `h x w` image. The stream is always advanced
    /// by the apply/skip draw; size and offsets are drawn only when applied.
    pub fn draw(&self, h: usize, w: usize, rng: &mut RngStream) -> DimDraw {
        if !rng.bernoulli(self.p) {
            return DimDraw::Identity;
        }
        let lo = ((self.min_scale * h as f64).ceil() as usize).clamp(1, h);
        let rh = rng.int_range(lo, h);
        let rw = ((rh * w + h / 2) / h).clamp(1, w);
        let top = rng.int_range(0, h - rh);
        let left = rng.int_range(0, w - rw);
        DimDraw::Resize { rh, rw, top, left }
    }
}

/// One realized diverse-input transform. It is linear in the image, so its
/// gradient pull-back is the adjoint scatter.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DimDraw {
    Identity,
    /// Nearest-neighbour resize to `rh x rw`, then zero-pad with the resized
    /// image's corner at `(top, left)`.
    Resize { rh: usize, rw: usize, top: usize, left: usize },
}

impl DimDraw {
    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        match *self {
            DimDraw::Identity => Ok(x.clone()),
            DimDraw::Resize { rh, rw, top, left } => {
                let (_, h, w) = x.chw()?;
                x.resize_nearest(rh, rw)?.zero_pad_at(h, w, top, left)
            }
        }
    }

    /// Maps a gradient with respect to the transformed image back to the
    /// original image (transpose of [`DimDraw::apply`]).
    pub fn pull_back(&self, grad: &Tensor) -> Result<Tensor> {
        match *self {
            DimDraw::Identity => Ok(grad.clone()),
            DimDraw::Resize { rh, rw, top, left } => {
                let (c, h, w) = grad.chw()?;
                let mut out = Tensor::zeros(grad.shape());
                let (g, o) = (grad.data(), out.data_mut());
                for ch in 0..c {
                    for i in 0..rh {
                        let si = nearest_source(i, h, rh);
                        for j in 0..rw {
                            let sj = nearest_source(j, w, rw);
                            o[ch * h * w + si * w + sj] += g[ch * h * w + (top + i) * w + left + j];
                        }
                    }
                }
                Ok(out)
            }
        }
    }
}

/// Transform the input with probability `spec.p`, otherwise return it unchanged.
pub fn dim_transform(x: &Tensor, spec: &DimSpec, rng: &mut RngStream) -> Result<Tensor> {
    let (_, h, w) = x.chw()?;
    spec.draw(h, w, rng).apply(x)
}

/// Normalized `(2k+1) x (2k+1)` smoothing kernel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelSpec {
    pub radius: usize,
    pub sigma: f64,
    pub weights: Tensor,
}

impl KernelSpec {
    /// Unit impulse of the given radius; smoothing with it is the identity.
    pub fn delta(radius: usize) -> Self {
        let size = 2 * radius + 1;
        let mut weights = Tensor::zeros(&[size, size]);
        weights.data_mut()[radius * size + radius] = 1.0;
        Self { radius, sigma: 0.0, weights }
    }

    pub fn size(&self) -> usize {
        2 * self.radius + 1
    }

    /// Kernel radius scaled to the image side: 1 up to 16 px, 3 from 28 px.
    pub fn default_radius(hw: usize) -> usize {
        match hw {
            0..=16 => 1,
            17..=27 => 2,
            _ => 3,
        }
    }
}

/// Gaussian with `σ = k / √3` sampled on `[-k, k]²` and normalized to sum 1.
pub fn gaussian_kernel(radius: usize) -> Result<KernelSpec> {
    if radius == 0 {
        return Err(Error::Config("kernel radius must be >= 1; use KernelSpec::delta for identity".into()));
    }
    let sigma = radius as f64 / 3f64.sqrt();
    let k = radius as i64;
    let size = 2 * radius + 1;
    let mut raw = Vec::with_capacity(size * size);
    for i in -k..=k {
        for j in -k..=k {
            let r2 = (i * i + j * j) as f64;
            raw.push((-r2 / (2.0 * sigma * sigma)).exp() / (2.0 * std::f64::consts::PI * sigma * sigma));
        }
    }
    let total: f64 = raw.iter().sum();
    let weights = Tensor::new(vec![size, size], raw.into_iter().map(|v| v / total).collect())?;
    Ok(KernelSpec { radius, sigma, weights })
}

/// Per-channel zero-padded convolution of a gradient field with the kernel.
pub fn smooth_gradient(grad: &Tensor, kernel: &KernelSpec) -> Result<Tensor> {
    grad.conv2d_same(&kernel.weights)
}
