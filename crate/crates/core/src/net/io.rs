//! `DAKM` model files.
//!
//! Layout (little-endian):
//!
//! ```text
//! "DAKM"  u16 version
//! u32 C, u32 H, u32 W, u32 classes
//! u8 training tag (0 normal, 1 adversarial), f64 epsilon, u32 steps
//! u64 seed
//! u32 layer count, then per layer: u8 kind, u32 a, u32 b, u32 c
//! f64 blobs: weight then bias for each parameterized layer, in order
//! ```

use std::path::Path;

use super::{Classifier, LayerParams, LayerSpec, TrainingMode};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MODEL_MAGIC: &[u8; 4] = b"DAKM";
pub const MODEL_FORMAT_VERSION: u16 = 1;

const HEADER_LEN: usize = 4 + 2 + 16 + 1 + 8 + 4 + 8 + 4;
const LAYER_RECORD_LEN: usize = 13;

pub fn to_bytes(model: &Classifier) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MODEL_MAGIC);
    out.extend_from_slice(&MODEL_FORMAT_VERSION.to_le_bytes());
    for d in model.input_shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    out.extend_from_slice(&(model.classes() as u32).to_le_bytes());
    let (tag, eps, steps) = match model.training {
        TrainingMode::Normal => (0u8, 0.0, 0usize),
        TrainingMode::Adversarial { epsilon, steps } => (1u8, epsilon, steps),
    };
    out.push(tag);
    out.extend_from_slice(&eps.to_le_bytes());
    out.extend_from_slice(&(steps as u32).to_le_bytes());
    out.extend_from_slice(&model.seed.to_le_bytes());
    out.extend_from_slice(&(model.specs().len() as u32).to_le_bytes());
    for spec in model.specs() {
        let (kind, a, b, c) = match *spec {
            LayerSpec::Dense { input, output } => (0u8, input, output, 0),
            LayerSpec::Conv { in_ch, out_ch, k } => (1u8, in_ch, out_ch, k),
            LayerSpec::Relu => (2u8, 0, 0, 0),
            LayerSpec::Flatten => (3u8, 0, 0, 0),
        };
        out.push(kind);
        for v in [a, b, c] {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
    }
    for t in model.parameters() {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> &'a [u8] {
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        s
    }
    fn u8(&mut self) -> u8 {
        self.take(1)[0]
    }
    fn u32(&mut self) -> usize {
        u32::from_le_bytes(self.take(4).try_into().unwrap()) as usize
    }
    fn u64(&mut self) -> u64 {
        u64::from_le_bytes(self.take(8).try_into().unwrap())
    }
    fn f64(&mut self) -> f64 {
        f64::from_le_bytes(self.take(8).try_into().unwrap())
    }
}

pub fn from_bytes(bytes: &[u8]) -> Result<Classifier> {
    if bytes.len() < 4 || &bytes[..4] != MODEL_MAGIC {
        let n = bytes.len().min(4);
        return Err(Error::BadMagic {
            expected: "DAKM".into(),
            found: String::from_utf8_lossy(&bytes[..n]).into_owned(),
        });
    }
    if bytes.len() < 6 {
        return Err(Error::Truncated { expected: HEADER_LEN, actual: bytes.len() });
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != MODEL_FORMAT_VERSION {
        return Err(Error::Version { found: version, expected: MODEL_FORMAT_VERSION });
    }
    if bytes.len() < HEADER_LEN {
        return Err(Error::Truncated { expected: HEADER_LEN, actual: bytes.len() });
    }
    let mut r = Reader { bytes, pos: 6 };
    let input_shape = [r.u32(), r.u32(), r.u32()];
    let classes = r.u32();
    let tag_offset = r.pos;
    let tag = r.u8();
    let epsilon = r.f64();
    let steps = r.u32();
    let training = match tag {
        0 => TrainingMode::Normal,
        1 => TrainingMode::Adversarial { epsilon, steps },
        t => return Err(Error::Format { offset: tag_offset, message: format!("unknown training tag {t}") }),
    };
    let seed = r.u64();
    let layer_count = r.u32();
    let table_end = HEADER_LEN + layer_count * LAYER_RECORD_LEN;
    if bytes.len() < table_end {
        return Err(Error::Truncated { expected: table_end, actual: bytes.len() });
    }
    let mut specs = Vec::with_capacity(layer_count);
    for _ in 0..layer_count {
        let off = r.pos;
        let kind = r.u8();
        let (a, b, c) = (r.u32(), r.u32(), r.u32());
        specs.push(match kind {
            0 => LayerSpec::Dense { input: a, output: b },
            1 => LayerSpec::Conv { in_ch: a, out_ch: b, k: c },
            2 => LayerSpec::Relu,
            3 => LayerSpec::Flatten,
            k => return Err(Error::Format { offset: off, message: format!("unknown layer kind {k}") }),
        });
    }
    let shapes: Vec<Option<(Vec<usize>, Vec<usize>)>> = specs.iter().map(|s| s.param_shapes()).collect();
    let n_params: usize = shapes
        .iter()
        .flatten()
        .map(|(w, b)| w.iter().product::<usize>() + b.iter().product::<usize>())
        .sum();
    let expected = table_end + n_params * 8;
    if bytes.len() < expected {
        return Err(Error::Truncated { expected, actual: bytes.len() });
    }
    if bytes.len() > expected {
        return Err(Error::Format { offset: expected, message: format!("{} trailing bytes", bytes.len() - expected) });
    }
    let mut read_tensor = |shape: &[usize]| -> Result<Tensor> {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| r.f64()).collect())
    };
    let mut params = Vec::with_capacity(specs.len());
    for s in &shapes {
        params.push(match s {
            Some((w, b)) => Some(LayerParams { weight: read_tensor(w)?, bias: read_tensor(b)? }),
            None => None,
        });
    }
    let model = Classifier::from_parts(input_shape, specs, params, training, seed)
        .map_err(|e| Error::Format { offset: HEADER_LEN, message: e.to_string() })?;
    if model.classes() != classes {
        return Err(Error::Format {
            offset: 18,
            message: format!("header declares {classes} classes, layers produce {}", model.classes()),
        });
    }
    Ok(model)
}

pub fn save_model(model: &Classifier, path: &Path) -> Result<()> {
    std::fs::write(path, to_bytes(model))?;
    Ok(())
}

pub fn load_model(path: &Path) -> Result<Classifier> {
    from_bytes(&std::fs::read(path)?)
}
