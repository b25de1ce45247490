//! Evaluation metrics and experiment procedures: attack success rate,
//! transfer tables, the robust-overlap ratio, perturbation cosine similarity
//! and hyper-parameter sweeps.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attacks::{attack_batch, AttackConfig, GradientModel};
use crate::error::{Error, Result};
use crate::tensor::{NoiseKind, Tensor};

pub const REPORT_SCHEMA: &str = "da-report/1";
pub const CSV_SCHEMA_LINE: &str = "#schema=da-report/1";

/// One adversarial example with its clean origin.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdversarialExample {
    /// Position in the evaluation set; aligns sets from different sources.
    pub index: usize,
    pub x: Tensor,
    pub x_star: Tensor,
    pub label: usize,
}

impl AdversarialExample {
    pub fn perturbation(&self) -> Tensor {
        self.x_star.sub(&self.x).expect("same shape")
    }
}

/// `D*`: adversarial examples crafted on one source.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdversarialSet {
    pub source: String,
    pub attack: String,
    pub config: AttackConfig,
    pub examples: Vec<AdversarialExample>,
}

impl AdversarialSet {
    /// Crafts the set by attacking every `(image, label)` pair on `model`.
    pub fn craft<M: GradientModel + ?Sized>(
        model: &M,
        source: &str,
        attack: &str,
        images: &[Tensor],
        labels: &[usize],
        config: &AttackConfig,
    ) -> Result<Self> {
        let results = attack_batch(model, images, labels, config)?;
        let examples = results
            .into_iter()
            .zip(images.iter().zip(labels))
            .enumerate()
            .map(|(index, (r, (x, &label)))| AdversarialExample { index, x: x.clone(), x_star: r.x_star, label })
            .collect();
        let set = Self { source: source.into(), attack: attack.into(), config: config.clone(), examples };
        set.check_budget()?;
        Ok(set)
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    /// Verifies `‖x* − x‖∞ ≤ ε + 1e-9` and `x* ∈ [0, 1]` for every element.
    pub fn check_budget(&self) -> Result<()> {
        for e in &self.examples {
            let over = e.perturbation().linf_norm();
            if over > self.config.epsilon + 1e-9 || e.x_star.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
                return Err(Error::Numeric(format!(
                    "example {} violates the budget: |delta|_inf = {over}, epsilon = {}",
                    e.index, self.config.epsilon
                )));
            }
        }
        Ok(())
    }
}

/// Percentage of adversarial examples the target misclassifies.
pub fn success_rate<M: GradientModel + ?Sized>(target: &M, set: &AdversarialSet) -> Result<f64> {
    if set.is_empty() {
        return Err(Error::Argument("success rate of an empty set is undefined".into()));
    }
    let fooled: usize = set
        .examples
        .par_iter()
        .map(|e| usize::from(target.predict(e.x_star.data()) != e.label))
        .sum();
    Ok(100.0 * fooled as f64 / set.len() as f64)
}

/// Indices of the examples the target still classifies correctly.
pub fn surviving<M: GradientModel + ?Sized>(target: &M, set: &AdversarialSet) -> BTreeSet<usize> {
    set.examples
        .iter()
        .filter(|e| target.predict(e.x_star.data()) == e.label)
        .map(|e| e.index)
        .collect()
}

/// `|(∪ S_normal) ∩ S_robust| / |∪ S_normal|`; `None` when the union is empty.
pub fn ratio_metric(normal: &[BTreeSet<usize>], robust: &BTreeSet<usize>) -> Option<f64> {
    let union: BTreeSet<usize> = normal.iter().flatten().copied().collect();
    if union.is_empty() {
        return None;
    }
    let both = union.intersection(robust).count();
    Some(both as f64 / union.len() as f64)
}

/// Cosine of two flattened tensors; `None` if either is zero.
pub fn cosine(a: &Tensor, b: &Tensor) -> Result<Option<f64>> {
    let dot = a.dot(b)?;
    let (na, nb) = (a.l2_norm(), b.l2_norm());
    if na == 0.0 || nb == 0.0 {
        return Ok(None);
    }
    Ok(Some((dot / (na * nb)).clamp(-1.0, 1.0)))
}

/// Pairwise mean cosine similarity between perturbation sets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityMatrix {
    pub attack: String,
    pub sources: Vec<String>,
    pub values: Vec<Vec<f64>>,
    /// Examples skipped per pair because a perturbation was zero.
    pub skipped: Vec<Vec<usize>>,
}

impl SimilarityMatrix {
    /// Mean over the strictly-upper triangle.
    pub fn mean_off_diagonal(&self) -> f64 {
        let n = self.sources.len();
        let mut total = 0.0;
        let mut count = 0usize;
        for i in 0..n {
            for j in i + 1..n {
                if self.values[i][j].is_finite() {
                    total += self.values[i][j];
                    count += 1;
                }
            }
        }
        if count == 0 {
            f64::NAN
        } else {
            total / count as f64
        }
    }
}

/// Which examples enter the cosine means.
#[derive(Debug, Clone, Default)]
pub enum CosineScope {
    #[default]
    All,
    /// Only the listed evaluation-set indices.
    Indices(BTreeSet<usize>),
}

/// For each pair of sources, the mean over shared examples of
/// `cos(δ_a, δ_b)`. Pairs where a perturbation is zero are skipped and
/// counted; a pair with no usable example gets NaN.
pub fn perturbation_cosine(sets: &[AdversarialSet], scope: &CosineScope) -> Result<SimilarityMatrix> {
    let first = sets
        .first()
        .ok_or_else(|| Error::Argument("no perturbation sets".into()))?;
    for s in sets {
        let aligned = s.len() == first.len()
            && s.examples.iter().zip(&first.examples).all(|(a, b)| a.index == b.index && a.label == b.label);
        if !aligned {
            return Err(Error::Argument(format!(
                "set from {:?} is not aligned with set from {:?}",
                s.source, first.source
            )));
        }
    }
    let keep: Vec<usize> = (0..first.len())
        .filter(|&k| match scope {
            CosineScope::All => true,
            CosineScope::Indices(ids) => ids.contains(&first.examples[k].index),
        })
        .collect();
    let deltas: Vec<Vec<Tensor>> = sets
        .iter()
        .map(|s| keep.iter().map(|&k| s.examples[k].perturbation()).collect())
        .collect();
    let n = sets.len();
    let mut values = vec![vec![1.0; n]; n];
    let mut skipped = vec![vec![0usize; n]; n];
    for i in 0..n {
        for j in i..n {
            let mut total = 0.0;
            let mut used = 0usize;
            for (a, b) in deltas[i].iter().zip(&deltas[j]) {
                match cosine(a, b)? {
                    Some(c) => {
                        total += c;
                        used += 1;
                    }
                    None => skipped[i][j] += 1,
                }
            }
            let mean = if used == 0 { f64::NAN } else { total / used as f64 };
            values[i][j] = if i == j && used > 0 { 1.0 } else { mean };
            values[j][i] = values[i][j];
            skipped[j][i] = skipped[i][j];
        }
    }
    Ok(SimilarityMatrix {
        attack: first.attack.clone(),
        sources: sets.iter().map(|s| s.source.clone()).collect(),
        values,
        skipped,
    })
}

/// One cell of a transfer table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub attack: String,
    pub source: String,
    pub target: String,
    pub success_rate: f64,
    #[serde(rename = "M")]
    pub m: usize,
    pub white_box: bool,
    pub seed: u64,
}

/// Success rate of `set` on every target; targets listed in `white_box` are
/// flagged as white-box rows.
pub fn transfer_rows<M: GradientModel + ?Sized>(
    set: &AdversarialSet,
    targets: &[(String, &M)],
    white_box: &[String],
) -> Result<Vec<ReportRow>> {
    targets
        .iter()
        .map(|(id, model)| {
            Ok(ReportRow {
                attack: set.attack.clone(),
                source: set.source.clone(),
                target: id.clone(),
                success_rate: success_rate(*model, set)?,
                m: set.len(),
                white_box: white_box.contains(id),
                seed: set.config.seed,
            })
        })
        .collect()
}

/// Hyper-parameters a sweep can vary.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SweepParam {
    #[serde(rename = "N")]
    Samples,
    #[serde(rename = "sigma")]
    Sigma,
    #[serde(rename = "epsilon")]
    Epsilon,
    #[serde(rename = "T")]
    Iterations,
    #[serde(rename = "alpha")]
    Alpha,
}

impl SweepParam {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "N" | "n" | "samples" => Ok(Self::Samples),
            "sigma" => Ok(Self::Sigma),
            "epsilon" | "eps" => Ok(Self::Epsilon),
            "T" | "t" | "iters" | "iterations" => Ok(Self::Iterations),
            "alpha" => Ok(Self::Alpha),
            _ => Err(Error::Config(format!("unknown sweep parameter {s:?}"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Samples => "N",
            Self::Sigma => "sigma",
            Self::Epsilon => "epsilon",
            Self::Iterations => "T",
            Self::Alpha => "alpha",
        }
    }

    /// Default grids in `[0, 1]` pixel units (ε and α scaled from the 0–255 scale).
    pub fn default_grid(self) -> Vec<f64> {
        match self {
            Self::Samples => vec![10.0, 20.0, 30.0, 40.0, 50.0],
            Self::Sigma => (0..=9).map(|i| i as f64 * 0.01).collect(),
            Self::Epsilon => (10..=16).map(|e| e as f64 / 255.0).collect(),
            Self::Iterations => vec![5.0, 8.0, 10.0, 12.0, 16.0, 19.0, 22.0],
            Self::Alpha => (8..=16).rev().map(|d| 16.0 / d as f64 / 255.0).collect(),
        }
    }

    /// `base` with this parameter set to `value`. Integer parameters must be
    /// whole numbers; an explicitly set α is never re-derived.
    pub fn apply(self, base: &AttackConfig, value: f64) -> Result<AttackConfig> {
        let mut cfg = base.clone();
        let whole = |v: f64| -> Result<usize> {
            if v >= 1.0 && v.fract() == 0.0 {
                Ok(v as usize)
            } else {
                Err(Error::Config(format!("{} must be a positive integer, got {v}", self.name())))
            }
        };
        match self {
            Self::Samples => cfg.samples = whole(value)?,
            Self::Iterations => cfg.iterations = whole(value)?,
            Self::Epsilon => cfg.epsilon = value,
            Self::Alpha => cfg.alpha = Some(value),
            Self::Sigma => match cfg.noise {
                NoiseKind::Gaussian { .. } => cfg.noise = NoiseKind::Gaussian { sigma: value },
                NoiseKind::Uniform { .. } => {
                    return Err(Error::Config("sigma sweep needs Gaussian noise".into()));
                }
            },
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub value: f64,
    pub rows: Vec<ReportRow>,
}

impl SweepPoint {
    /// Mean success over the non-white-box rows for `target` (all sources).
    pub fn black_box_success(&self, target: &str) -> Option<f64> {
        let vals: Vec<f64> = self
            .rows
            .iter()
            .filter(|r| r.target == target && !r.white_box)
            .map(|r| r.success_rate)
            .collect();
        (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
    }

    /// Mean success over every black-box row.
    pub fn mean_black_box(&self) -> Option<f64> {
        let vals: Vec<f64> = self.rows.iter().filter(|r| !r.white_box).map(|r| r.success_rate).collect();
        (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepCurve {
    pub parameter: SweepParam,
    pub attack: String,
    pub points: Vec<SweepPoint>,
}

/// A crafting source: an id, the model to differentiate, and the ids of the
/// targets that count as white-box for it.
pub struct Source<'a> {
    pub id: String,
    pub model: &'a dyn GradientModel,
    pub white_box: Vec<String>,
}

/// For each grid value: recraft `D*` on every source and evaluate every target.
pub fn sweep(
    parameter: SweepParam,
    grid: &[f64],
    attack: &str,
    base: &AttackConfig,
    sources: &[Source<'_>],
    targets: &[(String, &dyn GradientModel)],
    images: &[Tensor],
    labels: &[usize],
) -> Result<SweepCurve> {
    if grid.is_empty() {
        return Err(Error::Config("sweep grid is empty".into()));
    }
    let mut points = Vec::with_capacity(grid.len());
    for &value in grid {
        let cfg = parameter.apply(base, value)?;
        let mut rows = Vec::new();
        for s in sources {
            let set = AdversarialSet::craft(s.model, &s.id, attack, images, labels, &cfg)?;
            rows.extend(transfer_rows(&set, targets, &s.white_box)?);
        }
        points.push(SweepPoint { value, rows });
    }
    Ok(SweepCurve { parameter, attack: attack.into(), points })
}

/// Ratio metric of one adversarial set against one robust target.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RatioEntry {
    pub attack: String,
    pub source: String,
    pub robust_target: String,
    /// `None` when no example survived any normal model.
    pub ratio: Option<f64>,
}

/// How the attacked examples were selected from the evaluation pool.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub pool: usize,
    pub correct_by_all: usize,
    pub used: usize,
}

/// Everything one or more runs produced, ready to serialize.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferReport {
    pub schema: String,
    pub config_hash: String,
    pub dataset_hash: String,
    #[serde(default)]
    pub config: serde_json::Value,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub evaluation: Option<EvalSummary>,
    pub rows: Vec<ReportRow>,
    #[serde(default)]
    pub ratios: Vec<RatioEntry>,
    #[serde(default)]
    pub sweeps: Vec<SweepCurve>,
    #[serde(default)]
    pub similarity: Vec<SimilarityMatrix>,
}

impl TransferReport {
    pub fn new(config_hash: &str, dataset_hash: &str, config: serde_json::Value) -> Self {
        Self {
            schema: REPORT_SCHEMA.into(),
            config_hash: config_hash.into(),
            dataset_hash: dataset_hash.into(),
            config,
            evaluation: None,
            rows: Vec::new(),
            ratios: Vec::new(),
            sweeps: Vec::new(),
            similarity: Vec::new(),
        }
    }

    pub fn sort_rows(&mut self) {
        self.rows.sort_by(|a, b| {
            (&a.attack, &a.source, &a.target)
                .cmp(&(&b.attack, &b.source, &b.target))
                .then(a.seed.cmp(&b.seed))
        });
    }

    /// Union of several reports. Schemas and dataset hashes must agree; rows
    /// are stably sorted by `(attack, source, target)`.
    pub fn merge(parts: &[TransferReport]) -> Result<TransferReport> {
        let Some(first) = parts.first() else {
            return Err(Error::Argument("nothing to merge".into()));
        };
        let mut merged = TransferReport::new(&first.config_hash, &first.dataset_hash, first.config.clone());
        merged.schema = first.schema.clone();
        merged.evaluation = first.evaluation;
        for p in parts {
            if p.schema != first.schema {
                return Err(Error::Schema(format!("cannot merge schema {:?} with {:?}", p.schema, first.schema)));
            }
            if p.dataset_hash != first.dataset_hash {
                return Err(Error::Schema(format!(
                    "dataset hash {} differs from {}",
                    p.dataset_hash, first.dataset_hash
                )));
            }
            merged.rows.extend(p.rows.iter().cloned());
            merged.ratios.extend(p.ratios.iter().cloned());
            merged.sweeps.extend(p.sweeps.iter().cloned());
            merged.similarity.extend(p.similarity.iter().cloned());
        }
        merged.sort_rows();
        Ok(merged)
    }

    /// CSV with a leading schema line (which also carries the config and
    /// dataset hashes), then `attack,source,target,success_rate,M,seed`.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        writeln!(out, "{CSV_SCHEMA_LINE},config_hash={},dataset_hash={}", self.config_hash, self.dataset_hash).unwrap();
        writeln!(out, "attack,source,target,success_rate,M,seed").unwrap();
        for r in &self.rows {
            writeln!(out, "{},{},{},{:.4},{},{}", r.attack, r.source, r.target, r.success_rate, r.m, r.seed).unwrap();
        }
        out
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let value: serde_json::Value = serde_json::from_str(text)?;
        match value.get("schema").and_then(|s| s.as_str()) {
            Some(REPORT_SCHEMA) => Ok(serde_json::from_value(value)?),
            Some(other) => Err(Error::Schema(format!("unsupported report schema {other:?}"))),
            None => Err(Error::Schema("report has no schema field".into())),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attacks::Attack;
    use crate::net::{architecture, Classifier};
    use crate::rng::RngStream;
    use proptest::prelude::*;

    fn set_from(perturbations: &[Vec<f64>], source: &str) -> AdversarialSet {
        let cfg = AttackConfig::preset(Attack::Fgsm, 4).unwrap();
        let examples = perturbations
            .iter()
            .enumerate()
            .map(|(index, d)| {
                let x = Tensor::new(vec![1, 1, d.len()], vec![0.5; d.len()]).unwrap();
                let x_star = x.add(&Tensor::new(vec![1, 1, d.len()], d.clone()).unwrap()).unwrap();
                AdversarialExample { index, x, x_star, label: 0 }
            })
            .collect();
        AdversarialSet { source: source.into(), attack: "fgsm".into(), config: cfg, examples }
    }

    /// Predicts class 1 exactly when the first pixel exceeds 0.5.
    struct Threshold;
    impl GradientModel for Threshold {
        fn input_shape(&self) -> [usize; 3] {
            [1, 1, 2]
        }
        fn classes(&self) -> usize {
            2
        }
        fn logits(&self, x: &[f64]) -> Vec<f64> {
            vec![0.5, x[0]]
        }
        fn loss_and_gradient(&self, _: &[f64], _: usize) -> (f64, Vec<f64>) {
            (0.0, vec![0.0, 0.0])
        }
    }

    #[test]
    fn success_rate_counts() {
        let set = set_from(&[vec![0.1, 0.0], vec![0.2, 0.0], vec![-0.1, 0.0], vec![0.3, 0.0]], "s");
        assert_eq!(success_rate(&Threshold, &set).unwrap(), 75.0);
        let clean = set_from(&[vec![0.0, 0.0], vec![-0.2, 0.0]], "s");
        assert_eq!(success_rate(&Threshold, &clean).unwrap(), 0.0);
        let empty = set_from(&[], "s");
        assert!(success_rate(&Threshold, &empty).is_err());
    }

    #[test]
    fn success_rate_matches_loop_oracle() {
        let m = Classifier::new([1, 1, 4], architecture("mlp:5", [1, 1, 4], 3).unwrap(), 2).unwrap();
        let mut rng = RngStream::new(1, 0);
        let deltas: Vec<Vec<f64>> = (0..60).map(|_| (0..4).map(|_| rng.uniform_range(-0.5, 0.5)).collect()).collect();
        let mut set = set_from(&deltas, "s");
        for (i, e) in set.examples.iter_mut().enumerate() {
            e.label = i % 3;
        }
        let mut fooled = 0;
        for e in &set.examples {
            let logits = m.forward(&e.x_star).unwrap();
            if logits.argmax() != e.label {
                fooled += 1;
            }
        }
        assert_eq!(success_rate(&m, &set).unwrap(), 100.0 * fooled as f64 / 60.0);
    }

    #[test]
    fn ratio_examples() {
        let a: BTreeSet<usize> = [1, 2, 3].into();
        let b: BTreeSet<usize> = [3, 4].into();
        let all: BTreeSet<usize> = (0..10).collect();
        assert_eq!(ratio_metric(&[a.clone(), b.clone()], &all), Some(1.0));
        assert_eq!(ratio_metric(&[a.clone()], &[7, 8].into()), Some(0.0));
        assert_eq!(ratio_metric(&[BTreeSet::new()], &all), None);
        assert_eq!(ratio_metric(&[a, b], &[2, 4, 9].into()), Some(0.5));
    }

    proptest! {
        #[test]
        fn ratio_matches_set_oracle(
            normal in prop::collection::vec(prop::collection::btree_set(0usize..20, 0..20), 1..4),
            robust in prop::collection::btree_set(0usize..20, 0..20),
        ) {
            let mut in_union = [false; 20];
            for s in &normal {
                for &i in s {
                    in_union[i] = true;
                }
            }
            let union = in_union.iter().filter(|&&b| b).count();
            let both = (0..20).filter(|&i| in_union[i] && robust.contains(&i)).count();
            let expect = (union > 0).then(|| both as f64 / union as f64);
            prop_assert_eq!(ratio_metric(&normal, &robust), expect);
        }
    }

    #[test]
    fn cosine_examples() {
        let d = vec![vec![0.1, -0.2, 0.05], vec![0.0, 0.3, 0.3]];
        let same = perturbation_cosine(&[set_from(&d, "a"), set_from(&d, "b")], &CosineScope::All).unwrap();
        for row in &same.values {
            for v in row {
                assert!((v - 1.0).abs() < 1e-12);
            }
        }
        let neg: Vec<Vec<f64>> = d.iter().map(|v| v.iter().map(|x| -x).collect()).collect();
        let anti = perturbation_cosine(&[set_from(&d, "a"), set_from(&neg, "b")], &CosineScope::All).unwrap();
        assert!((anti.values[0][1] + 1.0).abs() < 1e-12);
        assert_eq!(anti.values[1][1], 1.0);
    }

    #[test]
    fn cosine_direct_formula() {
        let a: [f64; 3] = [0.3, -0.1, 0.2];
        let b: [f64; 3] = [-0.05, 0.25, 0.1];
        let dot = a[0] * b[0] + a[1] * b[1] + a[2] * b[2];
        let na = (a[0] * a[0] + a[1] * a[1] + a[2] * a[2]).sqrt();
        let nb = (b[0] * b[0] + b[1] * b[1] + b[2] * b[2]).sqrt();
        let m = perturbation_cosine(&[set_from(&[a.to_vec()], "a"), set_from(&[b.to_vec()], "b")], &CosineScope::All)
            .unwrap();
        assert!((m.values[0][1] - dot / (na * nb)).abs() < 1e-12);
    }

    #[test]
    fn cosine_skips_zero_perturbations() {
        let a = vec![vec![0.1, 0.1], vec![0.0, 0.0], vec![0.2, -0.1]];
        let b = vec![vec![0.1, 0.1], vec![0.1, 0.0], vec![0.2, -0.1]];
        let m = perturbation_cosine(&[set_from(&a, "a"), set_from(&b, "b")], &CosineScope::All).unwrap();
        assert_eq!(m.skipped[0][1], 1);
        assert!((m.values[0][1] - 1.0).abs() < 1e-12);
        let only_first = CosineScope::Indices([0].into());
        let m = perturbation_cosine(&[set_from(&a, "a"), set_from(&b, "b")], &only_first).unwrap();
        assert_eq!(m.skipped[0][1], 0);
    }

    #[test]
    fn cosine_matrix_symmetric_and_bounded() {
        let mut rng = RngStream::new(3, 0);
        let sets: Vec<AdversarialSet> = (0..4)
            .map(|s| {
                let d: Vec<Vec<f64>> = (0..10).map(|_| (0..6).map(|_| rng.uniform_range(-0.1, 0.1)).collect()).collect();
                set_from(&d, &format!("m{s}"))
            })
            .collect();
        let m = perturbation_cosine(&sets, &CosineScope::All).unwrap();
        for i in 0..4 {
            assert_eq!(m.values[i][i], 1.0);
            for j in 0..4 {
                assert_eq!(m.values[i][j], m.values[j][i]);
                assert!((-1.0..=1.0).contains(&m.values[i][j]));
            }
        }
    }

    #[test]
    fn misaligned_sets_rejected() {
        let a = set_from(&[vec![0.1], vec![0.2]], "a");
        let b = set_from(&[vec![0.1]], "b");
        assert!(perturbation_cosine(&[a, b], &CosineScope::All).is_err());
    }

    #[test]
    fn sweep_param_application() {
        let base = AttackConfig::preset(Attack::DaMiFgsm, 8).unwrap();
        assert_eq!(SweepParam::Samples.apply(&base, 10.0).unwrap().samples, 10);
        assert!(SweepParam::Samples.apply(&base, 2.5).is_err());
        let eps = SweepParam::Epsilon.apply(&base, 10.0 / 255.0).unwrap();
        assert_eq!(eps.alpha(), 10.0 / 255.0 / 12.0);
        assert_eq!(SweepParam::Alpha.apply(&base, 0.01).unwrap().alpha(), 0.01);
        let uni = AttackConfig { noise: AttackConfig::UNIFORM_NOISE, ..base };
        assert!(SweepParam::Sigma.apply(&uni, 0.05).is_err());
        assert_eq!(SweepParam::Sigma.default_grid().len(), 10);
        assert!((SweepParam::Alpha.default_grid()[0] - 1.0 / 255.0).abs() < 1e-15);
    }

    fn row(attack: &str, source: &str, target: &str) -> ReportRow {
        ReportRow {
            attack: attack.into(),
            source: source.into(),
            target: target.into(),
            success_rate: 50.0,
            m: 10,
            white_box: false,
            seed: 1,
        }
    }

    #[test]
    fn report_merge_law() {
        let mut a = TransferReport::new("c", "d", serde_json::Value::Null);
        a.rows = vec![row("mi-fgsm", "n1", "r0"), row("da-mi-fgsm", "n0", "r0")];
        let mut b = TransferReport::new("c", "d", serde_json::Value::Null);
        b.rows = vec![row("fgsm", "n0", "n1")];
        let merged = TransferReport::merge(&[a.clone(), b.clone()]).unwrap();
        let keys: Vec<_> = merged.rows.iter().map(|r| r.attack.as_str()).collect();
        assert_eq!(keys, ["da-mi-fgsm", "fgsm", "mi-fgsm"]);

        let mut other = b.clone();
        other.dataset_hash = "x".into();
        assert!(matches!(TransferReport::merge(&[a.clone(), other]), Err(Error::Schema(_))));
        let mut old = b;
        old.schema = "da-report/0".into();
        assert!(matches!(TransferReport::merge(&[a, old]), Err(Error::Schema(_))));
    }

    #[test]
    fn report_json_and_csv() {
        let mut r = TransferReport::new("c", "d", serde_json::Value::Null);
        let empty_csv = r.to_csv();
        assert_eq!(empty_csv.lines().count(), 2);
        assert!(empty_csv.starts_with(CSV_SCHEMA_LINE));
        r.rows.push(row("fgsm", "n0", "n1"));
        let back = TransferReport::from_json(&r.to_json().unwrap()).unwrap();
        assert_eq!(back, r);
        assert!(r.to_csv().lines().nth(2).unwrap().starts_with("fgsm,n0,n1,50.0000,10,1"));
        assert!(matches!(TransferReport::from_json("{\"schema\":\"v0\"}"), Err(Error::Schema(_))));
    }
}
