//! Dense row-major `f64` tensors and the handful of operations the attacks
//! and the gradient engine are built from.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::RngStream;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} holds {expected} values, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: (0..n).map(&mut f).collect(),
        }
    }

    /// 1-D tensor.
    pub fn vector(data: Vec<f64>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::Shape(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            )));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    fn check_same_shape(&self, other: &Tensor, op: &str) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::Shape(format!(
                "{op}: {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        Ok(())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    fn zip_with(&self, other: &Tensor, op: &str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        self.check_same_shape(other, op)?;
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, "sub", |a, b| a - b)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, "mul", |a, b| a * b)
    }

    pub fn scale(&self, factor: f64) -> Tensor {
        self.map(|v| v * factor)
    }

    /// `self += factor * other`.
    pub fn add_scaled(&mut self, other: &Tensor, factor: f64) -> Result<()> {
        self.check_same_shape(other, "add_scaled")?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += factor * b;
        }
        Ok(())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn max(&self) -> f64 {
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn l1_norm(&self) -> f64 {
        self.data.iter().map(|v| v.abs()).sum()
    }

    pub fn l2_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn linf_norm(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn dot(&self, other: &Tensor) -> Result<f64> {
        self.check_same_shape(other, "dot")?;
        Ok(self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum())
    }

    /// Index of the largest element; the first one wins ties.
    pub fn argmax(&self) -> usize {
        argmax(&self.data)
    }

    /// Elementwise sign with `sign(0) = 0`.
    pub fn sign(&self) -> Tensor {
        self.map(sign)
    }

    /// Matrix product of `[m, k]` and `[k, n]`.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (m, k) = match self.shape[..] {
            [m, k] => (m, k),
            _ => return Err(Error::Shape(format!("matmul lhs {:?} is not 2-D", self.shape))),
        };
        let n = match other.shape[..] {
            [k2, n] if k2 == k => n,
            _ => {
                return Err(Error::Shape(format!(
                    "matmul {:?} x {:?}",
                    self.shape, other.shape
                )))
            }
        };
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &self.data[i * k..(i + 1) * k];
            let out_row = &mut out[i * n..(i + 1) * n];
            for (p, &a) in row.iter().enumerate() {
                let b_row = &other.data[p * n..(p + 1) * n];
                for (o, &b) in out_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Tensor::new(vec![m, n], out)
    }

    /// Projects `self` (the candidate adversarial example) onto the box
    /// `[max(x - eps, lo), min(x + eps, hi)]`.
    pub fn clip_ball_and_range(&self, x: &Tensor, epsilon: f64, lo: f64, hi: f64) -> Result<Tensor> {
        self.check_same_shape(x, "clip_ball_and_range")?;
        if !(lo < hi) || !(epsilon >= 0.0) {
            return Err(Error::Argument(format!(
                "clip needs lo < hi and epsilon >= 0 (lo={lo}, hi={hi}, epsilon={epsilon})"
            )));
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&x.data)
                .map(|(&v, &c)| v.clamp((c - epsilon).max(lo), (c + epsilon).min(hi)))
                .collect(),
        })
    }

    /// Per-channel same-size cross-correlation of `[C, H, W]` with an odd
    /// `[k, k]` kernel, zero padded by `(k - 1) / 2`.
    pub fn conv2d_same(&self, kernel: &Tensor) -> Result<Tensor> {
        let (c, h, w) = self.chw()?;
        let k = match kernel.shape[..] {
            [a, b] if a == b => a,
            _ => return Err(Error::Shape(format!("kernel {:?} is not square", kernel.shape))),
        };
        if k % 2 == 0 {
            return Err(Error::Config(format!("kernel size {k} must be odd")));
        }
        if k > h.min(w) {
            return Err(Error::Config(format!(
                "kernel size {k} exceeds image size {h}x{w}"
            )));
        }
        let r = (k / 2) as isize;
        let mut out = vec![0.0; self.data.len()];
        for ch in 0..c {
            let plane = &self.data[ch * h * w..(ch + 1) * h * w];
            let out_plane = &mut out[ch * h * w..(ch + 1) * h * w];
            for i in 0..h as isize {
                for j in 0..w as isize {
                    let mut acc = 0.0;
                    for di in -r..=r {
                        let si = i + di;
                        if si < 0 || si >= h as isize {
                            continue;
                        }
                        for dj in -r..=r {
                            let sj = j + dj;
                            if sj < 0 || sj >= w as isize {
                                continue;
                            }
                            let kv = kernel.data[((di + r) as usize) * k + (dj + r) as usize];
                            acc += kv * plane[si as usize * w + sj as usize];
                        }
                    }
                    out_plane[i as usize * w + j as usize] = acc;
                }
            }
        }
        Tensor::new(self.shape.clone(), out)
    }

    /// Nearest-neighbour resize of `[C, H, W]` to `[C, out_h, out_w]`.
    pub fn resize_nearest(&self, out_h: usize, out_w: usize) -> Result<Tensor> {
        let (c, h, w) = self.chw()?;
        if out_h == 0 || out_w == 0 {
            return Err(Error::Argument("resize target must be non-empty".into()));
        }
        let mut out = Vec::with_capacity(c * out_h * out_w);
        for ch in 0..c {
            for i in 0..out_h {
                let si = nearest_source(i, h, out_h);
                for j in 0..out_w {
                    let sj = nearest_source(j, w, out_w);
                    out.push(self.data[ch * h * w + si * w + sj]);
                }
            }
        }
        Tensor::new(vec![c, out_h, out_w], out)
    }

    /// Places `[C, h, w]` into a zero canvas `[C, canvas_h, canvas_w]` with its
    /// top-left corner at `(top, left)`.
    pub fn zero_pad_at(&self, canvas_h: usize, canvas_w: usize, top: usize, left: usize) -> Result<Tensor> {
        let (c, h, w) = self.chw()?;
        if top + h > canvas_h || left + w > canvas_w {
            return Err(Error::Shape(format!(
                "{h}x{w} at ({top},{left}) does not fit a {canvas_h}x{canvas_w} canvas"
            )));
        }
        let mut out = vec![0.0; c * canvas_h * canvas_w];
        for ch in 0..c {
            for i in 0..h {
                let src = &self.data[ch * h * w + i * w..ch * h * w + (i + 1) * w];
                let start = ch * canvas_h * canvas_w + (top + i) * canvas_w + left;
                out[start..start + w].copy_from_slice(src);
            }
        }
        Tensor::new(vec![c, canvas_h, canvas_w], out)
    }

    pub(crate) fn chw(&self) -> Result<(usize, usize, usize)> {
        match self.shape[..] {
            [c, h, w] => Ok((c, h, w)),
            _ => Err(Error::Shape(format!("expected [C, H, W], got {:?}", self.shape))),
        }
    }
}

/// Source index for output position `i` when resizing `src` samples to `dst`.
pub(crate) fn nearest_source(i: usize, src: usize, dst: usize) -> usize {
    (i * src / dst).min(src - 1)
}

pub fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Numerically stable softmax (max-subtracted).
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&z| (z - m).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Distribution of the additive input noise.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum NoiseKind {
    Gaussian { sigma: f64 },
    Uniform { lo: f64, hi: f64 },
}

impl NoiseKind {
    pub fn validate(&self) -> Result<()> {
        match *self {
            NoiseKind::Gaussian { sigma } if !(sigma >= 0.0) || !sigma.is_finite() => {
                Err(Error::Config(format!("noise sigma must be >= 0, got {sigma}")))
            }
            NoiseKind::Uniform { lo, hi } if !(lo <= hi) || !lo.is_finite() || !hi.is_finite() => {
                Err(Error::Config(format!("uniform noise needs lo <= hi, got ({lo}, {hi})")))
            }
            _ => Ok(()),
        }
    }

    /// True when every draw is exactly zero.
    pub fn is_degenerate(&self) -> bool {
        match *self {
            NoiseKind::Gaussian { sigma } => sigma == 0.0,
            NoiseKind::Uniform { lo, hi } => lo == 0.0 && hi == 0.0,
        }
    }
}

/// I.i.d. noise of the given shape. A degenerate distribution returns the
/// zero tensor without consuming the stream.
pub fn sample_noise(shape: &[usize], kind: NoiseKind, rng: &mut RngStream) -> Tensor {
    if kind.is_degenerate() {
        return Tensor::zeros(shape);
    }
    match kind {
        NoiseKind::Gaussian { sigma } => Tensor::from_fn(shape, |_| sigma * rng.normal()),
        NoiseKind::Uniform { lo, hi } => Tensor::from_fn(shape, |_| rng.uniform_range(lo, hi)),
    }
}
