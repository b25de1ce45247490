#![allow(dead_code)]

use da_core::net::{architecture, Classifier};
use da_core::rng::RngStream;
use da_core::Tensor;

pub const ARCHS: [&str; 5] = ["linear", "mlp:7", "mlp:6,5", "cnn:2,5", "cnn:2+3,4"];

/// A randomly initialised classifier on `[c, hw, hw]` inputs.
pub fn net(arch: &str, c: usize, hw: usize, classes: usize, seed: u64) -> Classifier {
    let shape = [c, hw, hw];
    Classifier::new(shape, architecture(arch, shape, classes).unwrap(), seed).unwrap()
}

pub fn image(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = RngStream::new(seed, 99);
    Tensor::from_fn(shape, |_| rng.uniform())
}

/// Central finite difference of `f` around `x`, one coordinate at a time.
pub fn central_difference(x: &[f64], h: f64, f: impl Fn(&[f64]) -> f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            probe[i] = x[i] + h;
            let up = f(&probe);
            probe[i] = x[i] - h;
            let down = f(&probe);
            probe[i] = x[i];
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// `‖a - b‖₂ / max(‖a‖₂, ‖b‖₂)`, zero when both vanish.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let scale = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(b.iter().map(|x| x * x).sum::<f64>().sqrt());
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}
