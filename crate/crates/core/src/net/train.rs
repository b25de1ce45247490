use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{Classifier, Dataset, LayerSpec, TrainingMode};
use crate::error::{Error, Result};
use crate::rng::{sub_seed, RngStream};
use crate::tensor::{sign, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub epochs: usize,
    pub batch: usize,
    pub seed: u64,
    /// Adversarial mode only: epochs over which the PGD radius ramps
    /// linearly from `epsilon / warmup` up to `epsilon`.
    #[serde(default)]
    pub warmup: usize,
}

/// Examples per gradient work unit. Fixed so the summation order, and hence
/// the trained parameters, do not depend on the worker count.
const CHUNK: usize = 8;

/// Mini-batch SGD with a fixed learning rate. In adversarial mode every batch
/// is replaced by PGD examples (random start inside the `epsilon` ball)
/// crafted against the current parameters.
pub fn train(specs: &[LayerSpec], dataset: &Dataset, hyper: &TrainConfig, mode: TrainingMode) -> Result<Classifier> {
    if dataset.is_empty() {
        return Err(Error::Argument("cannot train on an empty dataset".into()));
    }
    if hyper.batch == 0 || !(hyper.lr > 0.0) {
        return Err(Error::Config(format!("batch must be >= 1 and lr > 0 (got {hyper:?})")));
    }
    if let TrainingMode::Adversarial { epsilon, steps } = mode {
        if !(epsilon >= 0.0) || steps == 0 {
            return Err(Error::Config("adversarial training needs epsilon >= 0 and steps >= 1".into()));
        }
    }
    let mut model = Classifier::new(dataset.image_shape(), specs.to_vec(), hyper.seed)?.with_training(mode);
    if model.classes() != dataset.classes() {
        return Err(Error::Shape(format!(
            "model has {} outputs, dataset {} classes",
            model.classes(),
            dataset.classes()
        )));
    }
    let mut shuffle_rng = RngStream::new(hyper.seed, 1);
    let pgd_seed = sub_seed(hyper.seed, "adversarial-training");
    let m = dataset.len();
    let mut order: Vec<usize> = (0..m).collect();
    for epoch in 0..hyper.epochs {
        shuffle_rng.shuffle(&mut order);
        let ramp = if epoch < hyper.warmup { (epoch + 1) as f64 / hyper.warmup as f64 } else { 1.0 };
        for (batch_idx, batch) in order.chunks(hyper.batch).enumerate() {
            let snapshot = &model;
            let partials: Vec<(f64, Vec<Tensor>)> = batch
                .par_chunks(CHUNK)
                .enumerate()
                .map(|(ci, chunk)| {
                    let mut grads = snapshot.zero_gradients();
                    let mut loss = 0.0;
                    for (k, &i) in chunk.iter().enumerate() {
                        let y = dataset.labels()[i];
                        let x = match mode {
                            TrainingMode::Normal => dataset.pixels(i).to_vec(),
                            TrainingMode::Adversarial { epsilon, steps } => {
                                let epsilon = epsilon * ramp;
                                let pos = batch_idx * hyper.batch + ci * CHUNK + k;
                                let mut rng = RngStream::new(pgd_seed, (epoch * m + pos) as u64);
                                let alpha = 2.5 * epsilon / steps as f64;
                                pgd_perturb(snapshot, dataset.pixels(i), y, epsilon, steps, alpha, &mut rng)
                            }
                        };
                        loss += snapshot.accumulate_parameter_gradient(&x, y, &mut grads);
                    }
                    (loss, grads)
                })
                .collect();
            let mut total_loss = 0.0;
            let mut total = model.zero_gradients();
            for (loss, grads) in partials {
                total_loss += loss;
                for (t, g) in total.iter_mut().zip(&grads) {
                    t.add_scaled(g, 1.0)?;
                }
            }
            if !total_loss.is_finite() {
                return Err(Error::Divergence { epoch, batch: batch_idx });
            }
            let step = hyper.lr / batch.len() as f64;
            for (p, g) in model.parameters_mut().into_iter().zip(&total) {
                p.add_scaled(g, -step)?;
            }
            if model.parameters().iter().any(|p| !p.is_finite()) {
                return Err(Error::Divergence { epoch, batch: batch_idx });
            }
        }
    }
    Ok(model)
}

/// L-infinity PGD: uniform random start in the ball, then `steps` signed
/// gradient ascent steps of size `alpha`, each projected back onto the ball
/// and the `[0, 1]` pixel range.
pub fn pgd_perturb(
    model: &Classifier,
    x: &[f64],
    label: usize,
    epsilon: f64,
    steps: usize,
    alpha: f64,
    rng: &mut RngStream,
) -> Vec<f64> {
    let clip = |v: f64, c: f64| v.clamp((c - epsilon).max(0.0), (c + epsilon).min(1.0));
    let mut adv: Vec<f64> = x.iter().map(|&c| clip(c + rng.uniform_range(-epsilon, epsilon), c)).collect();
    for _ in 0..steps {
        let (_, g) = model.loss_and_gradient_flat(&adv, label);
        for ((a, &c), gi) in adv.iter_mut().zip(x).zip(g) {
            *a = clip(*a + alpha * sign(gi), c);
        }
    }
    adv
}

/// Fraction of examples classified correctly.
pub fn accuracy(model: &Classifier, dataset: &Dataset) -> f64 {
    let correct: usize = (0..dataset.len())
        .into_par_iter()
        .map(|i| usize::from(model.predict(dataset.pixels(i)) == dataset.labels()[i]))
        .sum();
    correct as f64 / dataset.len() as f64
}

/// Accuracy under an `epsilon`-ball PGD attack with step `2.5 ε / steps`.
pub fn pgd_accuracy(model: &Classifier, dataset: &Dataset, epsilon: f64, steps: usize, seed: u64) -> f64 {
    let alpha = 2.5 * epsilon / steps.max(1) as f64;
    let correct: usize = (0..dataset.len())
        .into_par_iter()
        .map(|i| {
            let mut rng = RngStream::new(seed, i as u64);
            let y = dataset.labels()[i];
            let adv = pgd_perturb(model, dataset.pixels(i), y, epsilon, steps, alpha, &mut rng);
            usize::from(model.predict(&adv) == y)
        })
        .sum();
    correct as f64 / dataset.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::{architecture, BlobsSpec};

    fn blobs() -> Dataset {
        BlobsSpec { n: 200, classes: 2, hw: 4, spread: 0.08 }.generate(3).unwrap()
    }

    #[test]
    fn zero_epochs_returns_initialization() {
        let d = blobs();
        let specs = architecture("mlp:8", [1, 4, 4], 2).unwrap();
        let hyper = TrainConfig { lr: 0.1, epochs: 0, batch: 16, seed: 5, warmup: 0 };
        let trained = train(&specs, &d, &hyper, TrainingMode::Normal).unwrap();
        assert_eq!(trained, Classifier::new([1, 4, 4], specs, 5).unwrap());
    }

    #[test]
    fn training_is_deterministic() {
        let d = blobs();
        let specs = architecture("mlp:8", [1, 4, 4], 2).unwrap();
        let hyper = TrainConfig { lr: 0.1, epochs: 3, batch: 16, seed: 5, warmup: 0 };
        let mode = TrainingMode::Adversarial { epsilon: 0.05, steps: 2 };
        let a = train(&specs, &d, &hyper, mode).unwrap();
        let b = rayon::ThreadPoolBuilder::new()
            .num_threads(1)
            .build()
            .unwrap()
            .install(|| train(&specs, &d, &hyper, mode).unwrap());
        assert_eq!(a, b);
        assert_eq!(a.training, mode);
    }

    #[test]
    fn divergence_is_reported() {
        let d = blobs();
        let specs = architecture("mlp:8", [1, 4, 4], 2).unwrap();
        let hyper = TrainConfig { lr: 1e300, epochs: 5, batch: 16, seed: 1, warmup: 0 };
        assert!(matches!(
            train(&specs, &d, &hyper, TrainingMode::Normal),
            Err(Error::Divergence { .. })
        ));
    }

    #[test]
    fn pgd_stays_in_budget() {
        let d = blobs();
        let m = Classifier::new([1, 4, 4], architecture("mlp:8", [1, 4, 4], 2).unwrap(), 0).unwrap();
        let mut rng = RngStream::new(0, 0);
        let x = d.pixels(0);
        let adv = pgd_perturb(&m, x, d.labels()[0], 0.1, 5, 0.05, &mut rng);
        for (a, c) in adv.iter().zip(x) {
            assert!((a - c).abs() <= 0.1 + 1e-12 && (0.0..=1.0).contains(a));
        }
    }
}
