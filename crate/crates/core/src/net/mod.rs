//! Small feed-forward classifiers with exact reverse-mode gradients.
//!
//! A [`Classifier`] is a stack of dense, same-padded convolution, ReLU and
//! flatten layers operating on one `[C, H, W]` image at a time. Batched calls
//! loop over examples, so batched and unbatched results agree bit for bit.

mod data;
mod io;
mod train;

pub use data::{Dataset, RingsSpec, BlobsSpec};
pub use io::{load_model, save_model, to_bytes as model_bytes, MODEL_FORMAT_VERSION, MODEL_MAGIC};
pub use train::{accuracy, pgd_accuracy, pgd_perturb, train, TrainConfig};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::RngStream;
use crate::tensor::{softmax, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum LayerSpec {
    Dense { input: usize, output: usize },
    /// Stride-1 convolution with zero "same" padding.
    Conv { in_ch: usize, out_ch: usize, k: usize },
    Relu,
    Flatten,
}

impl LayerSpec {
    /// Output shape for a given input shape, or a description of why the
    /// layer cannot accept it.
    fn output_shape(&self, input: &[usize]) -> std::result::Result<Vec<usize>, String> {
        match *self {
            LayerSpec::Dense { input: n, output } => match input {
                [m] if *m == n => Ok(vec![output]),
                _ => Err(format!("dense({n}->{output}) cannot take {input:?}")),
            },
            LayerSpec::Conv { in_ch, out_ch, k } => match input {
                [c, h, w] if *c == in_ch && k % 2 == 1 && k <= *h.min(w) => Ok(vec![out_ch, *h, *w]),
                _ => Err(format!("conv({in_ch}->{out_ch}, k={k}) cannot take {input:?}")),
            },
            LayerSpec::Relu => Ok(input.to_vec()),
            LayerSpec::Flatten => Ok(vec![input.iter().product()]),
        }
    }

    fn param_shapes(&self) -> Option<(Vec<usize>, Vec<usize>)> {
        match *self {
            LayerSpec::Dense { input, output } => Some((vec![output, input], vec![output])),
            LayerSpec::Conv { in_ch, out_ch, k } => Some((vec![out_ch, in_ch, k, k], vec![out_ch])),
            LayerSpec::Relu | LayerSpec::Flatten => None,
        }
    }
}

/// How a model was trained; recorded in the model file.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "lowercase")]
pub enum TrainingMode {
    Normal,
    /// PGD adversarial training inside an L-infinity ball of `epsilon`.
    Adversarial { epsilon: f64, steps: usize },
}

/// Weight and bias of one parameterized layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub weight: Tensor,
    pub bias: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Classifier {
    input_shape: [usize; 3],
    classes: usize,
    specs: Vec<LayerSpec>,
    params: Vec<Option<LayerParams>>,
    /// Shape of each layer's input; `shapes[i]` feeds `specs[i]`.
    shapes: Vec<Vec<usize>>,
    pub training: TrainingMode,
    pub seed: u64,
}

impl Classifier {
    /// Builds a classifier with He-normal weights and zero biases.
    pub fn new(input_shape: [usize; 3], specs: Vec<LayerSpec>, seed: u64) -> Result<Self> {
        let mut rng = RngStream::new(seed, 0);
        let params = specs
            .iter()
            .map(|spec| {
                spec.param_shapes().map(|(w, b)| {
                    let fan_in: usize = w[1..].iter().product();
                    let std = (2.0 / fan_in as f64).sqrt();
                    LayerParams {
                        weight: Tensor::from_fn(&w, |_| std * rng.normal()),
                        bias: Tensor::zeros(&b),
                    }
                })
            })
            .collect();
        Self::from_parts(input_shape, specs, params, TrainingMode::Normal, seed)
    }

    pub fn from_parts(
        input_shape: [usize; 3],
        specs: Vec<LayerSpec>,
        params: Vec<Option<LayerParams>>,
        training: TrainingMode,
        seed: u64,
    ) -> Result<Self> {
        if specs.len() != params.len() {
            return Err(Error::Shape("one parameter slot per layer required".into()));
        }
        if input_shape.iter().any(|&d| d == 0) {
            return Err(Error::Shape(format!("empty input shape {input_shape:?}")));
        }
        let mut shapes = Vec::with_capacity(specs.len() + 1);
        let mut shape = input_shape.to_vec();
        for (spec, p) in specs.iter().zip(&params) {
            let next = spec.output_shape(&shape).map_err(Error::Shape)?;
            match (spec.param_shapes(), p) {
                (Some((w, b)), Some(p)) if p.weight.shape() == w && p.bias.shape() == b => {}
                (None, None) => {}
                _ => return Err(Error::Shape(format!("parameters do not fit layer {spec:?}"))),
            }
            shapes.push(shape);
            shape = next;
        }
        let classes = match shape[..] {
            [k] if k >= 2 => k,
            _ => {
                return Err(Error::Shape(format!(
                    "final layer must produce a class vector, got {shape:?}"
                )))
            }
        };
        shapes.push(shape);
        Ok(Self {
            input_shape,
            classes,
            specs,
            params,
            shapes,
            training,
            seed,
        })
    }

    pub fn with_training(mut self, training: TrainingMode) -> Self {
        self.training = training;
        self
    }

    pub fn input_shape(&self) -> [usize; 3] {
        self.input_shape
    }

    pub fn input_len(&self) -> usize {
        self.input_shape.iter().product()
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn specs(&self) -> &[LayerSpec] {
        &self.specs
    }

    pub fn layer_params(&self) -> &[Option<LayerParams>] {
        &self.params
    }

    /// Flat list of parameter tensors (weight then bias per parameterized layer).
    pub fn parameters(&self) -> Vec<&Tensor> {
        self.params
            .iter()
            .flatten()
            .flat_map(|p| [&p.weight, &p.bias])
            .collect()
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut Tensor> {
        self.params
            .iter_mut()
            .flatten()
            .flat_map(|p| [&mut p.weight, &mut p.bias])
            .collect()
    }

    /// Splits `x` into examples: `Some(batch)` for `[B, C, H, W]`, `None` for `[C, H, W]`.
    fn batch_size(&self, x: &Tensor) -> Result<Option<usize>> {
        let shape = x.shape();
        if shape == self.input_shape {
            Ok(None)
        } else if shape.len() == 4 && shape[1..] == self.input_shape {
            Ok(Some(shape[0]))
        } else {
            Err(Error::Shape(format!(
                "model expects {:?} (optionally batched), got {shape:?}",
                self.input_shape
            )))
        }
    }

    /// Logits `[K]` for one image or `[B, K]` for a batch.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        match self.batch_size(x)? {
            None => Ok(Tensor::vector(self.logits(x.data()))),
            Some(b) => {
                let n = self.input_len();
                let mut out = Vec::with_capacity(b * self.classes);
                for chunk in x.data().chunks(n) {
                    out.extend(self.logits(chunk));
                }
                Tensor::new(vec![b, self.classes], out)
            }
        }
    }

    /// Logits of a single flattened example. Panics on a length mismatch.
    pub fn logits(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.input_len(), "input length");
        let mut act = x.to_vec();
        for i in 0..self.specs.len() {
            act = self.layer_forward(i, &act);
        }
        act
    }

    pub fn predict(&self, x: &[f64]) -> usize {
        crate::tensor::argmax(&self.logits(x))
    }

    fn layer_forward(&self, i: usize, input: &[f64]) -> Vec<f64> {
        match (self.specs[i], &self.params[i]) {
            (LayerSpec::Dense { input: n, output }, Some(p)) => {
                let w = p.weight.data();
                let b = p.bias.data();
                (0..output)
                    .map(|o| {
                        let row = &w[o * n..(o + 1) * n];
                        b[o] + row.iter().zip(input).map(|(a, x)| a * x).sum::<f64>()
                    })
                    .collect()
            }
            (LayerSpec::Conv { in_ch, out_ch, k }, Some(p)) => {
                let (h, w) = (self.shapes[i][1], self.shapes[i][2]);
                conv_forward(input, p, in_ch, out_ch, k, h, w)
            }
            (LayerSpec::Relu, _) => input.iter().map(|&v| v.max(0.0)).collect(),
            (LayerSpec::Flatten, _) => input.to_vec(),
            _ => unreachable!("parameters validated at construction"),
        }
    }

    /// Activations of every layer; `acts[0]` is the input, the last entry the logits.
    fn trace(&self, x: &[f64]) -> Vec<Vec<f64>> {
        let mut acts = Vec::with_capacity(self.specs.len() + 1);
        acts.push(x.to_vec());
        for i in 0..self.specs.len() {
            let next = self.layer_forward(i, &acts[i]);
            acts.push(next);
        }
        acts
    }

    /// Reverse pass from a logit gradient. Returns the input gradient and,
    /// when `grads` is given, accumulates parameter gradients into it (same
    /// order as [`Classifier::parameters`]).
    fn backward(&self, acts: &[Vec<f64>], dlogits: Vec<f64>, mut grads: Option<&mut [Tensor]>) -> Vec<f64> {
        let mut delta = dlogits;
        let mut slot = self.params.iter().flatten().count() * 2;
        for i in (0..self.specs.len()).rev() {
            let input = &acts[i];
            delta = match (self.specs[i], &self.params[i]) {
                (LayerSpec::Dense { input: n, output }, Some(p)) => {
                    slot -= 2;
                    let w = p.weight.data();
                    if let Some(g) = grads.as_deref_mut() {
                        let (gw, gb) = g[slot..slot + 2].split_at_mut(1);
                        let gw = gw[0].data_mut();
                        let gb = gb[0].data_mut();
                        for o in 0..output {
                            let d = delta[o];
                            gb[o] += d;
                            if d != 0.0 {
                                for (gv, x) in gw[o * n..(o + 1) * n].iter_mut().zip(input) {
                                    *gv += d * x;
                                }
                            }
                        }
                    }
                    let mut din = vec![0.0; n];
                    for o in 0..output {
                        let d = delta[o];
                        if d != 0.0 {
                            for (dv, a) in din.iter_mut().zip(&w[o * n..(o + 1) * n]) {
                                *dv += d * a;
                            }
                        }
                    }
                    din
                }
                (LayerSpec::Conv { in_ch, out_ch, k }, Some(p)) => {
                    slot -= 2;
                    let (h, w) = (self.shapes[i][1], self.shapes[i][2]);
                    let g = grads.as_deref_mut().map(|g| &mut g[slot..slot + 2]);
                    conv_backward(input, &delta, p, in_ch, out_ch, k, h, w, g)
                }
                (LayerSpec::Relu, _) => delta
                    .iter()
                    .zip(input)
                    .map(|(&d, &x)| if x > 0.0 { d } else { 0.0 })
                    .collect(),
                (LayerSpec::Flatten, _) => delta,
                _ => unreachable!("parameters validated at construction"),
            };
        }
        delta
    }

    /// Zero-filled gradient buffers matching [`Classifier::parameters`].
    pub fn zero_gradients(&self) -> Vec<Tensor> {
        self.parameters()
            .into_iter()
            .map(|t| Tensor::zeros(t.shape()))
            .collect()
    }

    /// Cross-entropy loss and its exact gradient with respect to the input.
    pub fn loss_and_input_gradient(&self, x: &Tensor, label: usize) -> Result<(f64, Tensor)> {
        if x.shape() != self.input_shape {
            return Err(Error::Shape(format!(
                "input gradient expects {:?}, got {:?}",
                self.input_shape,
                x.shape()
            )));
        }
        self.check_label(label)?;
        let (loss, g) = self.loss_and_gradient_flat(x.data(), label);
        Ok((loss, Tensor::new(x.shape().to_vec(), g)?))
    }

    pub(crate) fn loss_and_gradient_flat(&self, x: &[f64], label: usize) -> (f64, Vec<f64>) {
        let acts = self.trace(x);
        let logits = acts.last().expect("at least the input");
        let (loss, dlogits) = cross_entropy_with_grad(logits, label);
        (loss, self.backward(&acts, dlogits, None))
    }

    /// `∇ₓ L(f(x), y)` for one image, or per-example gradients for a batch
    /// (`labels.len()` must equal the batch size).
    pub fn input_gradient(&self, x: &Tensor, labels: &[usize]) -> Result<Tensor> {
        match self.batch_size(x)? {
            None => {
                let &[y] = labels else {
                    return Err(Error::Argument("one label per example".into()));
                };
                Ok(self.loss_and_input_gradient(x, y)?.1)
            }
            Some(b) => {
                if labels.len() != b {
                    return Err(Error::Argument(format!("{b} examples but {} labels", labels.len())));
                }
                let n = self.input_len();
                let mut out = Vec::with_capacity(b * n);
                for (chunk, &y) in x.data().chunks(n).zip(labels) {
                    self.check_label(y)?;
                    out.extend(self.loss_and_gradient_flat(chunk, y).1);
                }
                Tensor::new(x.shape().to_vec(), out)
            }
        }
    }

    /// Input gradient of `Σ_k dlogits[k] · logit_k(x)`.
    pub fn input_gradient_from_logits(&self, x: &[f64], dlogits: &[f64]) -> Vec<f64> {
        let acts = self.trace(x);
        self.backward(&acts, dlogits.to_vec(), None)
    }

    /// Loss at `x` and accumulation of the parameter gradient into `grads`.
    pub fn accumulate_parameter_gradient(&self, x: &[f64], label: usize, grads: &mut [Tensor]) -> f64 {
        let acts = self.trace(x);
        let (loss, dlogits) = cross_entropy_with_grad(acts.last().expect("logits"), label);
        self.backward(&acts, dlogits, Some(grads));
        loss
    }

    pub fn loss(&self, x: &[f64], label: usize) -> f64 {
        cross_entropy(&self.logits(x), label)
    }

    fn check_label(&self, label: usize) -> Result<()> {
        if label >= self.classes {
            return Err(Error::Argument(format!(
                "label {label} out of range for {} classes",
                self.classes
            )));
        }
        Ok(())
    }
}

fn conv_forward(input: &[f64], p: &LayerParams, in_ch: usize, out_ch: usize, k: usize, h: usize, w: usize) -> Vec<f64> {
    let r = k / 2;
    let wt = p.weight.data();
    let mut out = vec![0.0; out_ch * h * w];
    for o in 0..out_ch {
        let plane = &mut out[o * h * w..(o + 1) * h * w];
        plane.fill(p.bias.data()[o]);
        for c in 0..in_ch {
            let src = &input[c * h * w..(c + 1) * h * w];
            for di in 0..k {
                for dj in 0..k {
                    let kv = wt[((o * in_ch + c) * k + di) * k + dj];
                    // output rows/cols whose source (i + di - r, j + dj - r) is inside
                    let i0 = r.saturating_sub(di);
                    let i1 = (h + r).saturating_sub(di).min(h);
                    let j0 = r.saturating_sub(dj);
                    let j1 = (w + r).saturating_sub(dj).min(w);
                    for i in i0..i1 {
                        let si = i + di - r;
                        let src_row = &src[si * w..(si + 1) * w];
                        let out_row = &mut plane[i * w..(i + 1) * w];
                        for j in j0..j1 {
                            out_row[j] += kv * src_row[j + dj - r];
                        }
                    }
                }
            }
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
fn conv_backward(
    input: &[f64],
    delta: &[f64],
    p: &LayerParams,
    in_ch: usize,
    out_ch: usize,
    k: usize,
    h: usize,
    w: usize,
    grads: Option<&mut [Tensor]>,
) -> Vec<f64> {
    let r = k / 2;
    let wt = p.weight.data();
    let mut din = vec![0.0; in_ch * h * w];
    let mut grads = grads;
    for o in 0..out_ch {
        let dplane = &delta[o * h * w..(o + 1) * h * w];
        if let Some(g) = grads.as_deref_mut() {
            g[1].data_mut()[o] += dplane.iter().sum::<f64>();
        }
        for c in 0..in_ch {
            let src = &input[c * h * w..(c + 1) * h * w];
            let dsrc = &mut din[c * h * w..(c + 1) * h * w];
            for di in 0..k {
                for dj in 0..k {
                    let widx = ((o * in_ch + c) * k + di) * k + dj;
                    let kv = wt[widx];
                    let i0 = r.saturating_sub(di);
                    let i1 = (h + r).saturating_sub(di).min(h);
                    let j0 = r.saturating_sub(dj);
                    let j1 = (w + r).saturating_sub(dj).min(w);
                    let mut gw = 0.0;
                    for i in i0..i1 {
                        let si = i + di - r;
                        let drow = &dplane[i * w..(i + 1) * w];
                        let srow = &src[si * w..(si + 1) * w];
                        let dsrow = &mut dsrc[si * w..(si + 1) * w];
                        for j in j0..j1 {
                            let sj = j + dj - r;
                            gw += drow[j] * srow[sj];
                            dsrow[sj] += kv * drow[j];
                        }
                    }
                    if let Some(g) = grads.as_deref_mut() {
                        g[0].data_mut()[widx] += gw;
                    }
                }
            }
        }
    }
    din
}

/// `-log softmax(logits)[label]`, computed with max subtraction.
pub fn cross_entropy(logits: &[f64], label: usize) -> f64 {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + logits.iter().map(|&z| (z - m).exp()).sum::<f64>().ln();
    (lse - logits[label]).max(0.0)
}

/// Loss plus `∂L/∂logits = softmax(logits) - onehot(label)`.
pub fn cross_entropy_with_grad(logits: &[f64], label: usize) -> (f64, Vec<f64>) {
    let mut g = softmax(logits);
    g[label] -= 1.0;
    (cross_entropy(logits, label), g)
}

/// Layer stacks for the built-in architectures, e.g. `mlp:64`, `mlp:96,48`,
/// `cnn:4` (one conv layer of 4 channels, kernel 3, then a dense head) or
/// `cnn:8+8,32` (two stacked conv layers, then a hidden dense layer of 32).
pub fn architecture(name: &str, input_shape: [usize; 3], classes: usize) -> Result<Vec<LayerSpec>> {
    let (kind, args) = name.split_once(':').unwrap_or((name, ""));
    let bad = || Error::Config(format!("bad architecture widths in {name:?}"));
    let mut fields = args.split(',').filter(|s| !args.is_empty() || !s.is_empty());
    let channels: Vec<usize> = if kind == "cnn" {
        fields
            .next()
            .ok_or_else(|| Error::Config("cnn needs a channel count, e.g. cnn:4".into()))?
            .split('+')
            .map(|s| s.trim().parse::<usize>().map_err(|_| bad()))
            .collect::<Result<_>>()?
    } else {
        Vec::new()
    };
    let widths: Vec<usize> = fields
        .map(|s| s.trim().parse::<usize>().map_err(|_| bad()))
        .collect::<Result<_>>()?;
    if widths.iter().chain(&channels).any(|&w| w == 0) {
        return Err(Error::Config(format!("zero width in {name:?}")));
    }
    let [c, h, w] = input_shape;
    let mut specs = Vec::new();
    match kind {
        "linear" | "mlp" => {
            if kind == "linear" && !widths.is_empty() {
                return Err(Error::Config("linear takes no widths".into()));
            }
            specs.push(LayerSpec::Flatten);
            let mut prev = c * h * w;
            for &width in &widths {
                specs.push(LayerSpec::Dense { input: prev, output: width });
                specs.push(LayerSpec::Relu);
                prev = width;
            }
            specs.push(LayerSpec::Dense { input: prev, output: classes });
        }
        "cnn" => {
            let mut in_ch = c;
            for &out_ch in &channels {
                specs.push(LayerSpec::Conv { in_ch, out_ch, k: 3 });
                specs.push(LayerSpec::Relu);
                in_ch = out_ch;
            }
            specs.push(LayerSpec::Flatten);
            let mut prev = in_ch * h * w;
            for &width in &widths {
                specs.push(LayerSpec::Dense { input: prev, output: width });
                specs.push(LayerSpec::Relu);
                prev = width;
            }
            specs.push(LayerSpec::Dense { input: prev, output: classes });
        }
        _ => return Err(Error::Config(format!("unknown architecture {name:?}"))),
    }
    Ok(specs)
}
