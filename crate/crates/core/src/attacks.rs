//! The attack engine.
//!
//! Every attack runs through one loop. At each iteration a direction is built
//! as
//!
//! ```text
//! base gradient -> [diverse-input transform] -> [direction aggregation]
//!               -> [Gaussian smoothing] -> [L1-normalized momentum]
//! ```
//!
//! and the iterate moves `alpha * sign(direction)` before being projected
//! onto the `epsilon` ball around the clean image and the `[0, 1]` range.
//! The named presets ([`Attack`]) are particular switch settings of that loop.

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::net::{cross_entropy, cross_entropy_with_grad, Classifier};
use crate::rng::RngStream;
use crate::tensor::{sample_noise, NoiseKind, Tensor};
use crate::transforms::{gaussian_kernel, smooth_gradient, DimDraw, DimSpec, KernelSpec};

/// Anything the engine can differentiate: a single classifier or an ensemble.
pub trait GradientModel: Sync {
    fn input_shape(&self) -> [usize; 3];
    fn classes(&self) -> usize;
    fn logits(&self, x: &[f64]) -> Vec<f64>;
    /// Cross-entropy at `x` and its gradient with respect to `x`.
    fn loss_and_gradient(&self, x: &[f64], label: usize) -> (f64, Vec<f64>);

    fn predict(&self, x: &[f64]) -> usize {
        crate::tensor::argmax(&self.logits(x))
    }
}

impl GradientModel for Classifier {
    fn input_shape(&self) -> [usize; 3] {
        Classifier::input_shape(self)
    }
    fn classes(&self) -> usize {
        Classifier::classes(self)
    }
    fn logits(&self, x: &[f64]) -> Vec<f64> {
        Classifier::logits(self, x)
    }
    fn loss_and_gradient(&self, x: &[f64], label: usize) -> (f64, Vec<f64>) {
        self.loss_and_gradient_flat(x, label)
    }
}

/// Several classifiers whose logits are fused by a weighted sum.
#[derive(Debug, Clone)]
pub struct Ensemble<'a> {
    members: Vec<&'a Classifier>,
    weights: Vec<f64>,
}

impl<'a> Ensemble<'a> {
    pub fn new(members: Vec<&'a Classifier>, weights: Vec<f64>) -> Result<Self> {
        let first = *members
            .first()
            .ok_or_else(|| Error::Argument("ensemble needs at least one member".into()))?;
        if weights.len() != members.len() {
            return Err(Error::Argument(format!(
                "{} members but {} weights",
                members.len(),
                weights.len()
            )));
        }
        if (weights.iter().sum::<f64>() - 1.0).abs() > 1e-9 || weights.iter().any(|&w| !(w >= 0.0)) {
            return Err(Error::Argument(format!("ensemble weights must be >= 0 and sum to 1, got {weights:?}")));
        }
        for m in &members {
            if m.classes() != first.classes() || m.input_shape() != first.input_shape() {
                return Err(Error::Shape(format!(
                    "ensemble members disagree: {:?}/{} classes vs {:?}/{} classes",
                    m.input_shape(),
                    m.classes(),
                    first.input_shape(),
                    first.classes()
                )));
            }
        }
        Ok(Self { members, weights })
    }

    pub fn equal(members: Vec<&'a Classifier>) -> Result<Self> {
        let w = 1.0 / members.len().max(1) as f64;
        let weights = vec![w; members.len()];
        Self::new(members, weights)
    }

    pub fn members(&self) -> &[&'a Classifier] {
        &self.members
    }
}

impl GradientModel for Ensemble<'_> {
    fn input_shape(&self) -> [usize; 3] {
        self.members[0].input_shape()
    }
    fn classes(&self) -> usize {
        self.members[0].classes()
    }
    fn logits(&self, x: &[f64]) -> Vec<f64> {
        let mut fused = vec![0.0; self.classes()];
        for (m, &w) in self.members.iter().zip(&self.weights) {
            for (f, z) in fused.iter_mut().zip(m.logits(x)) {
                *f += w * z;
            }
        }
        fused
    }
    fn loss_and_gradient(&self, x: &[f64], label: usize) -> (f64, Vec<f64>) {
        let (loss, dfused) = cross_entropy_with_grad(&GradientModel::logits(self, x), label);
        let mut grad = vec![0.0; x.len()];
        for (m, &w) in self.members.iter().zip(&self.weights) {
            let dlogits: Vec<f64> = dfused.iter().map(|d| w * d).collect();
            for (g, v) in grad.iter_mut().zip(m.input_gradient_from_logits(x, &dlogits)) {
                *g += v;
            }
        }
        (loss, grad)
    }
}

/// Weighted sum of member logits for one image.
pub fn ensemble_logits(models: &[&Classifier], weights: &[f64], x: &Tensor) -> Result<Tensor> {
    let ensemble = Ensemble::new(models.to_vec(), weights.to_vec())?;
    check_input(&ensemble, x)?;
    Ok(Tensor::vector(GradientModel::logits(&ensemble, x.data())))
}

fn check_input<M: GradientModel + ?Sized>(model: &M, x: &Tensor) -> Result<()> {
    if x.shape() != model.input_shape() {
        return Err(Error::Shape(format!(
            "model expects {:?}, got {:?}",
            model.input_shape(),
            x.shape()
        )));
    }
    Ok(())
}

fn gradient<M: GradientModel + ?Sized>(model: &M, x: &Tensor, label: usize) -> Tensor {
    let (_, g) = model.loss_and_gradient(x.data(), label);
    Tensor::new(x.shape().to_vec(), g).expect("gradient has input shape")
}

/// Gradient at `x` seen through one diverse-input draw (if any), pulled back
/// to the coordinates of `x`.
fn transformed_gradient<M: GradientModel + ?Sized>(
    model: &M,
    x: &Tensor,
    label: usize,
    dim: Option<&DimSpec>,
    rng: &mut RngStream,
) -> Result<Tensor> {
    match dim {
        None => Ok(gradient(model, x, label)),
        Some(spec) => {
            let [_, h, w] = model.input_shape();
            let draw: DimDraw = spec.draw(h, w, rng);
            let g = gradient(model, &draw.apply(x)?, label);
            draw.pull_back(&g)
        }
    }
}

/// What each noisy sample contributes to an aggregated direction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SampleDirection {
    /// `sign(∇ₓL)`: the signed, L∞-projected direction.
    #[default]
    Sign,
    /// The raw gradient `∇ₓL`.
    Raw,
}

/// Settings for summing per-sample directions around an iterate.
#[derive(Debug, Clone, Copy)]
pub struct Aggregator<'a> {
    /// `N`; the sum runs over `N + 1` draws indexed `0..=N`.
    pub samples: usize,
    pub noise: NoiseKind,
    pub dim: Option<&'a DimSpec>,
    /// Use the noise-free point for draw 0 instead of a random draw.
    pub clean_anchor: bool,
    pub mode: SampleDirection,
}

impl Aggregator<'_> {
    /// `Σ_{i=0..N} d(x + ε_i)` where `d` is the sign (or raw) gradient.
    /// Each draw takes its noise first, then its diverse-input transform.
    pub fn direction<M: GradientModel + ?Sized>(
        &self,
        model: &M,
        x: &Tensor,
        label: usize,
        rng: &mut RngStream,
    ) -> Result<Tensor> {
        if self.samples == 0 {
            return Err(Error::Config("aggregation needs N >= 1".into()));
        }
        check_input(model, x)?;
        let mut total = Tensor::zeros(x.shape());
        for i in 0..=self.samples {
            let noisy = if i == 0 && self.clean_anchor {
                x.clone()
            } else {
                x.add(&sample_noise(x.shape(), self.noise, rng))?
            };
            let g = transformed_gradient(model, &noisy, label, self.dim, rng)?;
            match self.mode {
                SampleDirection::Sign => total.add_scaled(&g.sign(), 1.0)?,
                SampleDirection::Raw => total.add_scaled(&g, 1.0)?,
            }
        }
        Ok(total)
    }
}

/// Aggregated signed direction `g_a = Σ_{i=0..N} sign(∇ₓL(f(T(x + ε_i)), y))`.
/// Entries are integers in `[-(N+1), N+1]`.
pub fn aggregate_direction<M: GradientModel + ?Sized>(
    model: &M,
    x: &Tensor,
    label: usize,
    samples: usize,
    noise: NoiseKind,
    dim: Option<&DimSpec>,
    rng: &mut RngStream,
) -> Result<Tensor> {
    Aggregator { samples, noise, dim, clean_anchor: false, mode: SampleDirection::Sign }.direction(model, x, label, rng)
}

/// Sum of the signs of already-computed directions.
pub fn sum_signed(directions: &[Tensor]) -> Result<Tensor> {
    let first = directions
        .first()
        .ok_or_else(|| Error::Argument("no directions to aggregate".into()))?;
    let mut total = Tensor::zeros(first.shape());
    for d in directions {
        total.add_scaled(&d.sign(), 1.0)?;
    }
    Ok(total)
}

/// Monte-Carlo gradient of the noise-smoothed loss:
/// `(1/N) Σ_{i=1..N} ∇ₓL(f(x + ε_i), y)`.
pub fn smoothed_gradient_mc<M: GradientModel + ?Sized>(
    model: &M,
    x: &Tensor,
    label: usize,
    samples: usize,
    noise: NoiseKind,
    rng: &mut RngStream,
) -> Result<Tensor> {
    if samples == 0 {
        return Err(Error::Argument("Monte-Carlo estimate needs N >= 1".into()));
    }
    check_input(model, x)?;
    let mut total = Tensor::zeros(x.shape());
    for _ in 0..samples {
        let noisy = x.add(&sample_noise(x.shape(), noise, rng))?;
        total.add_scaled(&gradient(model, &noisy, label), 1.0)?;
    }
    Ok(total.scale(1.0 / samples as f64))
}

/// Named attack presets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Attack {
    #[serde(rename = "fgsm")]
    Fgsm,
    #[serde(rename = "i-fgsm")]
    IFgsm,
    #[serde(rename = "pgd")]
    Pgd,
    #[serde(rename = "mi-fgsm")]
    MiFgsm,
    #[serde(rename = "dim")]
    Dim,
    #[serde(rename = "tim")]
    Tim,
    #[serde(rename = "ti-dim")]
    TiDim,
    #[serde(rename = "da-fgsm")]
    DaFgsm,
    #[serde(rename = "da-i-fgsm")]
    DaIFgsm,
    #[serde(rename = "da-mi-fgsm")]
    DaMiFgsm,
    #[serde(rename = "da-dim")]
    DaDim,
    #[serde(rename = "da-tim")]
    DaTim,
    #[serde(rename = "da-ti-dim")]
    DaTiDim,
}

impl Attack {
    pub const ALL: [Attack; 13] = [
        Attack::Fgsm,
        Attack::IFgsm,
        Attack::Pgd,
        Attack::MiFgsm,
        Attack::Dim,
        Attack::Tim,
        Attack::TiDim,
        Attack::DaFgsm,
        Attack::DaIFgsm,
        Attack::DaMiFgsm,
        Attack::DaDim,
        Attack::DaTim,
        Attack::DaTiDim,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Attack::Fgsm => "fgsm",
            Attack::IFgsm => "i-fgsm",
            Attack::Pgd => "pgd",
            Attack::MiFgsm => "mi-fgsm",
            Attack::Dim => "dim",
            Attack::Tim => "tim",
            Attack::TiDim => "ti-dim",
            Attack::DaFgsm => "da-fgsm",
            Attack::DaIFgsm => "da-i-fgsm",
            Attack::DaMiFgsm => "da-mi-fgsm",
            Attack::DaDim => "da-dim",
            Attack::DaTim => "da-tim",
            Attack::DaTiDim => "da-ti-dim",
        }
    }

    pub fn is_aggregated(self) -> bool {
        matches!(
            self,
            Attack::DaFgsm | Attack::DaIFgsm | Attack::DaMiFgsm | Attack::DaDim | Attack::DaTim | Attack::DaTiDim
        )
    }

    /// The preset with direction aggregation switched off.
    pub fn base(self) -> Attack {
        match self {
            Attack::DaFgsm => Attack::Fgsm,
            Attack::DaIFgsm => Attack::IFgsm,
            Attack::DaMiFgsm => Attack::MiFgsm,
            Attack::DaDim => Attack::Dim,
            Attack::DaTim => Attack::Tim,
            Attack::DaTiDim => Attack::TiDim,
            other => other,
        }
    }
}

impl fmt::Display for Attack {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Attack {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Attack::ALL
            .into_iter()
            .find(|a| a.name() == s.to_ascii_lowercase())
            .ok_or_else(|| Error::Config(format!("unknown attack preset {s:?}")))
    }
}

/// Every hyper-parameter of one attack run. Pixel units are `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackConfig {
    pub epsilon: f64,
    pub iterations: usize,
    /// Step size; `epsilon / iterations` when unset.
    pub alpha: Option<f64>,
    pub mu: f64,
    /// `N`: aggregation sums `N + 1` draws.
    pub samples: usize,
    pub noise: NoiseKind,
    pub dim: Option<DimSpec>,
    pub tim: Option<KernelSpec>,
    pub momentum: bool,
    pub aggregate: bool,
    pub random_start: bool,
    pub clean_anchor: bool,
    pub seed: u64,
}

impl AttackConfig {
    pub const DEFAULT_EPSILON: f64 = 16.0 / 255.0;
    pub const DEFAULT_ITERATIONS: usize = 12;
    pub const DEFAULT_MU: f64 = 1.0;
    pub const DEFAULT_SAMPLES: usize = 30;
    pub const DEFAULT_SIGMA: f64 = 0.05;
    pub const DEFAULT_DIM_PROB: f64 = 0.5;
    pub const UNIFORM_NOISE: NoiseKind = NoiseKind::Uniform { lo: -0.08, hi: 0.08 };

    /// Default settings for a preset on `hw x hw` images.
    pub fn preset(attack: Attack, hw: usize) -> Result<Self> {
        let mut cfg = AttackConfig {
            epsilon: Self::DEFAULT_EPSILON,
            iterations: Self::DEFAULT_ITERATIONS,
            alpha: None,
            mu: Self::DEFAULT_MU,
            samples: Self::DEFAULT_SAMPLES,
            noise: NoiseKind::Gaussian { sigma: Self::DEFAULT_SIGMA },
            dim: None,
            tim: None,
            momentum: false,
            aggregate: attack.is_aggregated(),
            random_start: false,
            clean_anchor: false,
            seed: 0,
        };
        let dim = || DimSpec::new(Self::DEFAULT_DIM_PROB, DimSpec::DEFAULT_MIN_SCALE);
        let tim = || gaussian_kernel(KernelSpec::default_radius(hw));
        match attack.base() {
            Attack::Fgsm => cfg.iterations = 1,
            Attack::IFgsm => {}
            Attack::Pgd => cfg.random_start = true,
            Attack::MiFgsm => cfg.momentum = true,
            Attack::Dim => {
                cfg.momentum = true;
                cfg.dim = Some(dim()?);
            }
            Attack::Tim => {
                cfg.momentum = true;
                cfg.tim = Some(tim()?);
            }
            Attack::TiDim => {
                cfg.momentum = true;
                cfg.dim = Some(dim()?);
                cfg.tim = Some(tim()?);
            }
            _ => unreachable!("base() strips aggregation"),
        }
        Ok(cfg)
    }

    pub fn alpha(&self) -> f64 {
        self.alpha.unwrap_or(self.epsilon / self.iterations as f64)
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon >= 0.0) || !self.epsilon.is_finite() {
            return Err(Error::Config(format!("epsilon must be >= 0, got {}", self.epsilon)));
        }
        if self.iterations == 0 {
            return Err(Error::Config("iterations must be >= 1".into()));
        }
        if let Some(a) = self.alpha {
            if !(a > 0.0) || !a.is_finite() {
                return Err(Error::Config(format!("alpha must be > 0, got {a}")));
            }
        }
        if self.aggregate && self.samples == 0 {
            return Err(Error::Config("aggregation needs N >= 1".into()));
        }
        if !(self.mu >= 0.0) {
            return Err(Error::Config(format!("mu must be >= 0, got {}", self.mu)));
        }
        self.noise.validate()?;
        if let Some(d) = &self.dim {
            d.validate()?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackResult {
    pub x_star: Tensor,
    pub perturbation: Tensor,
    /// White-box loss after each iteration.
    pub loss_trace: Vec<f64>,
    pub config: AttackConfig,
    pub seed: u64,
}

impl AttackResult {
    pub fn iterations(&self) -> usize {
        self.loss_trace.len()
    }

    pub fn final_loss(&self) -> f64 {
        self.loss_trace.last().copied().unwrap_or(f64::NAN)
    }
}

/// Runs one attack with the stream `(config.seed, 0)`.
pub fn run_attack<M: GradientModel + ?Sized>(model: &M, x: &Tensor, label: usize, config: &AttackConfig) -> Result<AttackResult> {
    let mut rng = RngStream::new(config.seed, 0);
    run_attack_with_rng(model, x, label, config, &mut rng)
}

pub fn run_attack_with_rng<M: GradientModel + ?Sized>(
    model: &M,
    x: &Tensor,
    label: usize,
    config: &AttackConfig,
    rng: &mut RngStream,
) -> Result<AttackResult> {
    config.validate()?;
    check_input(model, x)?;
    if label >= model.classes() {
        return Err(Error::Argument(format!("label {label} out of range")));
    }
    if let Some(k) = &config.tim {
        let [_, h, w] = model.input_shape();
        if k.size() > h.min(w) {
            return Err(Error::Config(format!("kernel {0}x{0} larger than the {h}x{w} image", k.size())));
        }
    }
    let eps = config.epsilon;
    let alpha = config.alpha();
    let aggregator = Aggregator {
        samples: config.samples,
        noise: config.noise,
        dim: config.dim.as_ref(),
        clean_anchor: config.clean_anchor,
        mode: SampleDirection::Sign,
    };

    let mut x_adv = if config.random_start {
        let start = Tensor::from_fn(x.shape(), |_| rng.uniform_range(-eps, eps));
        x.add(&start)?.clip_ball_and_range(x, eps, 0.0, 1.0)?
    } else {
        x.clone()
    };
    let mut momentum = Tensor::zeros(x.shape());
    let mut loss_trace = Vec::with_capacity(config.iterations);

    for _ in 0..config.iterations {
        let mut dir = if config.aggregate {
            aggregator.direction(model, &x_adv, label, rng)?
        } else {
            transformed_gradient(model, &x_adv, label, config.dim.as_ref(), rng)?
        };
        if let Some(kernel) = &config.tim {
            dir = smooth_gradient(&dir, kernel)?;
        }
        let step = if config.momentum {
            let norm = dir.l1_norm();
            // A zero direction contributes nothing instead of dividing by zero.
            for (g, &d) in momentum.data_mut().iter_mut().zip(dir.data()) {
                *g = config.mu * *g + if norm > 0.0 { d / norm } else { 0.0 };
            }
            momentum.sign()
        } else {
            dir.sign()
        };
        let mut next = x_adv;
        next.add_scaled(&step, alpha)?;
        x_adv = next.clip_ball_and_range(x, eps, 0.0, 1.0)?;
        loss_trace.push(cross_entropy(&model.logits(x_adv.data()), label));
    }

    if !x_adv.is_finite() {
        return Err(Error::Numeric("adversarial example is not finite".into()));
    }
    let perturbation = x_adv.sub(x)?;
    Ok(AttackResult { x_star: x_adv, perturbation, loss_trace, config: config.clone(), seed: config.seed })
}

/// Attacks every example in parallel; example `i` uses stream `(seed, i)`,
/// so results do not depend on the worker count.
pub fn attack_batch<M: GradientModel + ?Sized>(
    model: &M,
    images: &[Tensor],
    labels: &[usize],
    config: &AttackConfig,
) -> Result<Vec<AttackResult>> {
    if images.len() != labels.len() {
        return Err(Error::Argument(format!("{} images but {} labels", images.len(), labels.len())));
    }
    config.validate()?;
    images
        .par_iter()
        .zip(labels.par_iter())
        .enumerate()
        .map(|(i, (x, &y))| {
            let mut rng = RngStream::new(config.seed, i as u64);
            run_attack_with_rng(model, x, y, config, &mut rng)
        })
        .collect()
}
