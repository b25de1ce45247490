//! Experiment orchestration: configuration, run directories, dataset
//! materialization, zoo training, attack runs, sweeps and report merging.
//!
//! Everything a run produces lives under `<output>/<config hash>/`:
//!
//! ```text
//! dataset.dakd
//! manifest.json
//! models/<id>.dakm
//! sets/<preset>@<source>.json      adversarial sets
//! reports/<preset>@<source>.json   transfer rows for one attack run
//! sweeps/<param>@<preset>.json
//! report.json, report.csv          merged by `report`
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::analysis::{
    perturbation_cosine, ratio_metric, surviving, sweep, transfer_rows, AdversarialSet, CosineScope, EvalSummary,
    RatioEntry, Source, SweepCurve, SweepParam, TransferReport,
};
use crate::attacks::{Attack, AttackConfig, Ensemble, GradientModel};
use crate::error::{Error, Result};
use crate::net::{
    accuracy, architecture, load_model, model_bytes, pgd_accuracy, train, BlobsSpec, Classifier, Dataset, RingsSpec,
    TrainConfig, TrainingMode,
};
use crate::rng::{sub_seed, RngStream};
use crate::tensor::{NoiseKind, Tensor};
use crate::transforms::{gaussian_kernel, DimSpec};

pub const MANIFEST_SCHEMA: &str = "da-manifest/1";
pub const SET_SCHEMA: &str = "da-set/1";
/// Source id that selects the equal-weight ensemble of all normal models.
pub const ENSEMBLE: &str = "ensemble";

/// A complete experiment description, read from TOML. Unknown keys are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Master seed; every other seed is derived from it.
    pub seed: u64,
    #[serde(default = "default_output")]
    pub output: PathBuf,
    pub dataset: DatasetConfig,
    #[serde(default)]
    pub training: TrainingDefaults,
    #[serde(default, rename = "model")]
    pub models: Vec<ModelConfig>,
    #[serde(default)]
    pub attack: AttackSection,
    #[serde(default, rename = "sweep")]
    pub sweeps: Vec<SweepConfig>,
}

fn default_output() -> PathBuf {
    PathBuf::from("runs")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetKind {
    Rings,
    Blobs,
    File,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub kind: DatasetKind,
    /// Required for `kind = "file"`.
    #[serde(default)]
    pub path: Option<PathBuf>,
    #[serde(default = "d_n")]
    pub n: usize,
    #[serde(default = "d_classes")]
    pub classes: usize,
    #[serde(default = "d_hw")]
    pub hw: usize,
    #[serde(default = "d_noise")]
    pub noise: f64,
    #[serde(default = "d_contrast")]
    pub contrast: f64,
    #[serde(default = "d_jitter")]
    pub jitter: f64,
    #[serde(default = "d_spread")]
    pub spread: f64,
    /// Leading fraction used for training; the rest is the evaluation pool.
    #[serde(default = "d_train_fraction")]
    pub train_fraction: f64,
}

fn d_n() -> usize {
    2000
}
fn d_classes() -> usize {
    4
}
fn d_hw() -> usize {
    16
}
fn d_noise() -> f64 {
    0.05
}
fn d_contrast() -> f64 {
    1.0
}
fn d_jitter() -> f64 {
    0.08
}
fn d_spread() -> f64 {
    0.1
}
fn d_train_fraction() -> f64 {
    0.75
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingDefaults {
    pub lr: f64,
    pub epochs: usize,
    pub batch: usize,
    /// Epsilon warm-up epochs for adversarially trained models.
    pub warmup: usize,
    /// Fraction of training labels redrawn uniformly at random; the
    /// evaluation pool keeps its true labels.
    pub label_noise: f64,
    /// Radius and step count of the PGD evaluation recorded in the manifest.
    pub eval_epsilon: f64,
    pub eval_steps: usize,
}

impl Default for TrainingDefaults {
    fn default() -> Self {
        Self { lr: 0.05, epochs: 20, batch: 32, warmup: 0, label_noise: 0.0, eval_epsilon: 16.0 / 255.0, eval_steps: 10 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelTraining {
    Normal,
    Pgd,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub id: String,
    /// Architecture name, e.g. `mlp:64` or `cnn:8+8,32`.
    pub arch: String,
    #[serde(default = "m_training")]
    pub training: ModelTraining,
    #[serde(default = "m_train_epsilon")]
    pub train_epsilon: f64,
    #[serde(default = "m_train_steps")]
    pub train_steps: usize,
    #[serde(default)]
    pub lr: Option<f64>,
    #[serde(default)]
    pub epochs: Option<usize>,
}

fn m_training() -> ModelTraining {
    ModelTraining::Normal
}
fn m_train_epsilon() -> f64 {
    16.0 / 255.0
}
fn m_train_steps() -> usize {
    5
}

impl ModelConfig {
    pub fn mode(&self) -> TrainingMode {
        match self.training {
            ModelTraining::Normal => TrainingMode::Normal,
            ModelTraining::Pgd => TrainingMode::Adversarial { epsilon: self.train_epsilon, steps: self.train_steps },
        }
    }

    pub fn is_normal(&self) -> bool {
        self.training == ModelTraining::Normal
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NoiseChoice {
    Gaussian,
    Uniform,
}

/// Optional overrides of preset hyper-parameters, in `[0, 1]` pixel units.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackParams {
    pub epsilon: Option<f64>,
    pub iterations: Option<usize>,
    pub alpha: Option<f64>,
    pub mu: Option<f64>,
    pub samples: Option<usize>,
    pub noise: Option<NoiseChoice>,
    /// Gaussian standard deviation.
    pub sigma: Option<f64>,
    /// Half-width `b` of uniform noise `U(-b, b)`.
    pub noise_bound: Option<f64>,
    pub dim_prob: Option<f64>,
    pub dim_min_scale: Option<f64>,
    pub kernel_radius: Option<usize>,
    pub clean_anchor: Option<bool>,
}

impl AttackParams {
    /// Fields set in `self` win over `base`.
    pub fn over(&self, base: &AttackParams) -> AttackParams {
        AttackParams {
            epsilon: self.epsilon.or(base.epsilon),
            iterations: self.iterations.or(base.iterations),
            alpha: self.alpha.or(base.alpha),
            mu: self.mu.or(base.mu),
            samples: self.samples.or(base.samples),
            noise: self.noise.or(base.noise),
            sigma: self.sigma.or(base.sigma),
            noise_bound: self.noise_bound.or(base.noise_bound),
            dim_prob: self.dim_prob.or(base.dim_prob),
            dim_min_scale: self.dim_min_scale.or(base.dim_min_scale),
            kernel_radius: self.kernel_radius.or(base.kernel_radius),
            clean_anchor: self.clean_anchor.or(base.clean_anchor),
        }
    }

    /// The preset's configuration with these overrides applied. Single-step
    /// presets keep `T = 1`; DIM and TIM knobs only touch presets that use them.
    pub fn config(&self, attack: Attack, hw: usize, seed: u64) -> Result<AttackConfig> {
        let mut cfg = AttackConfig::preset(attack, hw)?.with_seed(seed);
        if let Some(e) = self.epsilon {
            cfg.epsilon = e;
        }
        if let Some(t) = self.iterations {
            if attack.base() != Attack::Fgsm {
                cfg.iterations = t;
            }
        }
        cfg.alpha = self.alpha.or(cfg.alpha);
        if let Some(mu) = self.mu {
            cfg.mu = mu;
        }
        if let Some(n) = self.samples {
            cfg.samples = n;
        }
        let sigma = self.sigma.unwrap_or(AttackConfig::DEFAULT_SIGMA);
        let bound = self.noise_bound.unwrap_or(0.08);
        cfg.noise = match self.noise.unwrap_or(NoiseChoice::Gaussian) {
            NoiseChoice::Gaussian => NoiseKind::Gaussian { sigma },
            NoiseChoice::Uniform => NoiseKind::Uniform { lo: -bound, hi: bound },
        };
        if let Some(d) = cfg.dim.as_mut() {
            *d = DimSpec::new(self.dim_prob.unwrap_or(d.p), self.dim_min_scale.unwrap_or(d.min_scale))?;
        }
        if let (Some(k), Some(_)) = (self.kernel_radius, cfg.tim.as_ref()) {
            cfg.tim = Some(gaussian_kernel(k)?);
        }
        if let Some(c) = self.clean_anchor {
            cfg.clean_anchor = c;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackSection {
    #[serde(default = "a_presets")]
    pub presets: Vec<String>,
    /// Model ids or `"ensemble"`; empty means every normal model.
    #[serde(default)]
    pub sources: Vec<String>,
    /// Examples attacked, taken from the evaluation pool after filtering.
    #[serde(default = "a_eval_size")]
    pub eval_size: usize,
    #[serde(default)]
    pub params: AttackParams,
}

fn a_presets() -> Vec<String> {
    vec!["i-fgsm".into(), "mi-fgsm".into(), "da-mi-fgsm".into()]
}
fn a_eval_size() -> usize {
    100
}

impl Default for AttackSection {
    fn default() -> Self {
        Self { presets: a_presets(), sources: Vec::new(), eval_size: a_eval_size(), params: AttackParams::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    /// One of `N`, `sigma`, `epsilon`, `T`, `alpha`.
    pub parameter: String,
    /// Defaults to the parameter's standard grid.
    #[serde(default)]
    pub grid: Option<Vec<f64>>,
    #[serde(default = "s_attack")]
    pub attack: String,
    /// Empty means the first normal model.
    #[serde(default)]
    pub sources: Vec<String>,
    /// Applied on top of `[attack.params]`.
    #[serde(default)]
    pub params: AttackParams,
}

fn s_attack() -> String {
    "da-mi-fgsm".into()
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    /// Checks cross-references and value ranges; touches no files.
    pub fn validate(&self) -> Result<()> {
        let d = &self.dataset;
        if d.kind == DatasetKind::File && d.path.is_none() {
            return Err(Error::Config("dataset kind \"file\" needs a path".into()));
        }
        if !(d.train_fraction > 0.0 && d.train_fraction < 1.0) {
            return Err(Error::Config("train_fraction must lie in (0, 1)".into()));
        }
        if self.models.is_empty() {
            return Err(Error::Config("the zoo needs at least one [[model]]".into()));
        }
        let mut seen = std::collections::BTreeSet::new();
        for m in &self.models {
            if m.id.is_empty() || m.id == ENSEMBLE || m.id.contains(['/', '\\', '@']) {
                return Err(Error::Config(format!("invalid model id {:?}", m.id)));
            }
            if !seen.insert(m.id.as_str()) {
                return Err(Error::Config(format!("duplicate model id {:?}", m.id)));
            }
            architecture(&m.arch, [1, 4, 4], 2)?;
        }
        for p in &self.attack.presets {
            p.parse::<Attack>()?;
        }
        for s in &self.attack.sources {
            self.check_source(s)?;
        }
        for sw in &self.sweeps {
            SweepParam::parse(&sw.parameter)?;
            sw.attack.parse::<Attack>()?;
            if matches!(&sw.grid, Some(g) if g.is_empty()) {
                return Err(Error::Config("sweep grid is empty".into()));
            }
            for s in &sw.sources {
                self.check_source(s)?;
            }
        }
        if !(0.0..1.0).contains(&self.training.label_noise) {
            return Err(Error::Config("label_noise must lie in [0, 1)".into()));
        }
        if self.attack.eval_size == 0 {
            return Err(Error::Config("eval_size must be >= 1".into()));
        }
        Ok(())
    }

    fn check_source(&self, id: &str) -> Result<()> {
        if id == ENSEMBLE {
            if !self.models.iter().any(|m| m.is_normal()) {
                return Err(Error::Config("ensemble source needs at least one normal model".into()));
            }
            return Ok(());
        }
        if self.models.iter().any(|m| m.id == id) {
            Ok(())
        } else {
            Err(Error::Config(format!("source {id:?} is not a model in the zoo")))
        }
    }

    /// SHA-256 over the canonical JSON form, excluding the output directory.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.output = PathBuf::new();
        hex_digest(&serde_json::to_vec(&c).expect("config serializes"))
    }

    pub fn run_dir(&self) -> PathBuf {
        self.output.join(&self.hash()[..16])
    }

    pub fn normal_ids(&self) -> Vec<String> {
        self.models.iter().filter(|m| m.is_normal()).map(|m| m.id.clone()).collect()
    }

    pub fn dataset_seed(&self) -> u64 {
        sub_seed(self.seed, "dataset")
    }

    pub fn train_seed(&self) -> u64 {
        sub_seed(self.seed, "train")
    }

    pub fn attack_seed(&self) -> u64 {
        sub_seed(self.seed, "attack")
    }

    pub fn eval_seed(&self) -> u64 {
        sub_seed(self.seed, "eval")
    }

    fn echo(&self) -> serde_json::Value {
        let mut c = self.clone();
        c.output = PathBuf::new();
        serde_json::to_value(c).expect("config serializes")
    }
}

pub fn hex_digest(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Generates a synthetic dataset from the config.
pub fn generate_dataset(cfg: &DatasetConfig, seed: u64) -> Result<Dataset> {
    match cfg.kind {
        DatasetKind::Rings => RingsSpec {
            n: cfg.n,
            classes: cfg.classes,
            hw: cfg.hw,
            noise: cfg.noise,
            contrast: cfg.contrast,
            jitter: cfg.jitter,
        }
        .generate(seed),
        DatasetKind::Blobs => BlobsSpec { n: cfg.n, classes: cfg.classes, hw: cfg.hw, spread: cfg.spread }.generate(seed),
        DatasetKind::File => Err(Error::Config("file datasets are imported, not generated".into())),
    }
}

/// Reads and validates a DAKD file.
pub fn import_dataset(path: &Path) -> Result<Dataset> {
    if !path.exists() {
        return Err(Error::Config(format!("dataset file {} does not exist", path.display())));
    }
    Dataset::load(path)
}

/// Materializes `dataset.dakd` in the run directory if missing; returns the
/// dataset and the hash of its bytes.
pub fn cmd_dataset(cfg: &ExperimentConfig) -> Result<(Dataset, String)> {
    let path = cfg.run_dir().join("dataset.dakd");
    if path.exists() {
        let bytes = fs::read(&path)?;
        return Ok((Dataset::from_bytes(&bytes)?, hex_digest(&bytes)));
    }
    let data = match cfg.dataset.kind {
        DatasetKind::File => import_dataset(cfg.dataset.path.as_deref().expect("validated"))?,
        _ => generate_dataset(&cfg.dataset, cfg.dataset_seed())?,
    };
    let bytes = data.to_bytes();
    write_atomic(&path, &bytes)?;
    Ok((data, hex_digest(&bytes)))
}

/// Train and evaluation partitions of the run dataset.
pub fn split(cfg: &ExperimentConfig, data: &Dataset) -> Result<(Dataset, Dataset)> {
    let n_train = ((data.len() as f64) * cfg.dataset.train_fraction).round() as usize;
    if n_train == 0 || n_train >= data.len() {
        return Err(Error::Config(format!("dataset of {} cannot be split at {n_train}", data.len())));
    }
    data.split_at(n_train)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelRecord {
    pub id: String,
    pub arch: String,
    pub training: TrainingMode,
    pub file: String,
    pub sha256: String,
    pub clean_accuracy: f64,
    pub pgd_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub schema: String,
    pub config_hash: String,
    pub dataset_hash: String,
    pub pgd_epsilon: f64,
    pub pgd_steps: usize,
    pub models: Vec<ModelRecord>,
}

/// A trained zoo held in memory, in config order.
pub struct Zoo {
    pub models: Vec<(ModelConfig, Classifier)>,
}

impl Zoo {
    pub fn get(&self, id: &str) -> Option<&Classifier> {
        self.models.iter().find(|(c, _)| c.id == id).map(|(_, m)| m)
    }

    pub fn normal(&self) -> Vec<&Classifier> {
        self.models.iter().filter(|(c, _)| c.is_normal()).map(|(_, m)| m).collect()
    }

    pub fn targets(&self) -> Vec<(String, &dyn GradientModel)> {
        self.models.iter().map(|(c, m)| (c.id.clone(), m as &dyn GradientModel)).collect()
    }
}

fn model_matches(model: &Classifier, specs: &[crate::net::LayerSpec], mode: TrainingMode, seed: u64) -> bool {
    model.specs() == specs && model.training == mode && model.seed == seed
}

/// Trains every zoo model that does not already have a valid file, then
/// writes the manifest. The dataset is checked before any training starts.
pub fn cmd_train(cfg: &ExperimentConfig) -> Result<(Zoo, Manifest)> {
    cfg.validate()?;
    let (data, dataset_hash) = cmd_dataset(cfg)?;
    let (train_set, eval_set) = split(cfg, &data)?;
    let train_set = if cfg.training.label_noise > 0.0 {
        train_set.with_label_noise(cfg.training.label_noise, sub_seed(cfg.seed, "labels"))?
    } else {
        train_set
    };
    let dir = cfg.run_dir();
    let mut models = Vec::with_capacity(cfg.models.len());
    let mut records = Vec::with_capacity(cfg.models.len());
    let t = &cfg.training;
    for mc in &cfg.models {
        let specs = architecture(&mc.arch, data.image_shape(), data.classes())?;
        let seed = sub_seed(cfg.train_seed(), &mc.id);
        let mode = mc.mode();
        let file = format!("models/{}.dakm", mc.id);
        let path = dir.join(&file);
        let existing = path.exists().then(|| load_model(&path).ok()).flatten();
        let model = match existing {
            Some(m) if model_matches(&m, &specs, mode, seed) => {
                log::info!("model {} already trained, skipping", mc.id);
                m
            }
            _ => {
                let hyper = TrainConfig {
                    lr: mc.lr.unwrap_or(t.lr),
                    epochs: mc.epochs.unwrap_or(t.epochs),
                    batch: t.batch,
                    seed,
                    warmup: if mc.is_normal() { 0 } else { t.warmup },
                };
                log::info!("training {} ({}, {:?})", mc.id, mc.arch, mode);
                let m = train(&specs, &train_set, &hyper, mode)?;
                write_atomic(&path, &model_bytes(&m))?;
                m
            }
        };
        let bytes = fs::read(&path)?;
        records.push(ModelRecord {
            id: mc.id.clone(),
            arch: mc.arch.clone(),
            training: mode,
            file,
            sha256: hex_digest(&bytes),
            clean_accuracy: accuracy(&model, &eval_set),
            pgd_accuracy: pgd_accuracy(&model, &eval_set, t.eval_epsilon, t.eval_steps, cfg.eval_seed()),
        });
        models.push((mc.clone(), model));
    }
    let manifest = Manifest {
        schema: MANIFEST_SCHEMA.into(),
        config_hash: cfg.hash(),
        dataset_hash,
        pgd_epsilon: t.eval_epsilon,
        pgd_steps: t.eval_steps,
        models: records,
    };
    write_atomic(&dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?.as_bytes())?;
    Ok((Zoo { models }, manifest))
}

/// The attacked examples: the evaluation pool in a seeded order, keeping
/// only examples every zoo model classifies correctly, truncated to `eval_size`.
#[derive(Debug, Clone)]
pub struct EvalSet {
    pub images: Vec<Tensor>,
    pub labels: Vec<usize>,
    pub summary: EvalSummary,
}

pub fn eval_set(cfg: &ExperimentConfig, data: &Dataset, zoo: &Zoo) -> Result<EvalSet> {
    let (_, pool) = split(cfg, data)?;
    let mut order: Vec<usize> = (0..pool.len()).collect();
    RngStream::new(cfg.eval_seed(), 0).shuffle(&mut order);
    let keep: Vec<usize> = order
        .into_iter()
        .filter(|&i| zoo.models.iter().all(|(_, m)| m.predict(pool.pixels(i)) == pool.labels()[i]))
        .collect();
    let correct_by_all = keep.len();
    let used: Vec<usize> = keep.into_iter().take(cfg.attack.eval_size).collect();
    log::info!(
        "evaluation filter: {correct_by_all} of {} pool examples correct on every model, using {}",
        pool.len(),
        used.len()
    );
    if used.is_empty() {
        return Err(Error::Numeric("no evaluation example is classified correctly by every model".into()));
    }
    Ok(EvalSet {
        images: used.iter().map(|&i| pool.image(i)).collect(),
        labels: used.iter().map(|&i| pool.labels()[i]).collect(),
        summary: EvalSummary { pool: pool.len(), correct_by_all, used: used.len() },
    })
}

/// Everything needed to attack: trained zoo, evaluation set, hashes.
pub struct Workspace {
    pub config: ExperimentConfig,
    pub data: Dataset,
    pub dataset_hash: String,
    pub zoo: Zoo,
    pub manifest: Manifest,
    pub eval: EvalSet,
}

impl Workspace {
    /// Materializes the dataset and zoo (reusing existing artifacts).
    pub fn open(cfg: &ExperimentConfig) -> Result<Self> {
        let (zoo, manifest) = cmd_train(cfg)?;
        let (data, dataset_hash) = cmd_dataset(cfg)?;
        let eval = eval_set(cfg, &data, &zoo)?;
        Ok(Self { config: cfg.clone(), data, dataset_hash, zoo, manifest, eval })
    }

    fn hw(&self) -> usize {
        self.data.image_shape()[1]
    }

    fn new_report(&self) -> TransferReport {
        let mut r = TransferReport::new(&self.config.hash(), &self.dataset_hash, self.config.echo());
        r.evaluation = Some(self.eval.summary);
        r
    }

    /// Resolves a source id into a differentiable model and its white-box ids.
    fn source<'a>(&'a self, id: &str, ensemble: &'a Option<Ensemble<'a>>) -> Result<Source<'a>> {
        self.config.check_source(id)?;
        if id == ENSEMBLE {
            let e = ensemble.as_ref().expect("built when normal models exist");
            return Ok(Source { id: id.into(), model: e, white_box: self.config.normal_ids() });
        }
        let m = self.zoo.get(id).expect("checked");
        Ok(Source { id: id.into(), model: m, white_box: vec![id.into()] })
    }

    fn ensemble(&self) -> Result<Option<Ensemble<'_>>> {
        let normal = self.zoo.normal();
        if normal.is_empty() {
            return Ok(None);
        }
        Ok(Some(Ensemble::equal(normal)?))
    }

    /// Runs one preset from one source, writes `D*` and the report rows.
    pub fn attack(&self, preset: &str, source: &str, overrides: &AttackParams) -> Result<TransferReport> {
        let attack: Attack = preset.parse()?;
        let params = overrides.over(&self.config.attack.params);
        let config = params.config(attack, self.hw(), self.config.attack_seed())?;
        let ensemble = self.ensemble()?;
        let src = self.source(source, &ensemble)?;
        let set = AdversarialSet::craft(src.model, source, attack.name(), &self.eval.images, &self.eval.labels, &config)?;
        let targets = self.zoo.targets();
        let mut report = self.new_report();
        report.rows = transfer_rows(&set, &targets, &src.white_box)?;
        report.ratios = self.ratios(&set, &src.white_box);
        report.sort_rows();

        let dir = self.config.run_dir();
        let stem = format!("{}@{}", attack.name(), source);
        let stored = StoredSet { schema: SET_SCHEMA.into(), config_hash: self.config.hash(), set };
        write_atomic(&dir.join("sets").join(format!("{stem}.json")), &serde_json::to_vec(&stored)?)?;
        write_atomic(&dir.join("reports").join(format!("{stem}.json")), report.to_json()?.as_bytes())?;
        Ok(report)
    }

    /// Ratio metric per robust target, from the black-box normal models.
    fn ratios(&self, set: &AdversarialSet, white_box: &[String]) -> Vec<RatioEntry> {
        let normal: Vec<_> = self
            .zoo
            .models
            .iter()
            .filter(|(c, _)| c.is_normal() && !white_box.contains(&c.id))
            .map(|(_, m)| surviving(m, set))
            .collect();
        if normal.is_empty() {
            return Vec::new();
        }
        self.zoo
            .models
            .iter()
            .filter(|(c, _)| !c.is_normal())
            .map(|(c, m)| RatioEntry {
                attack: set.attack.clone(),
                source: set.source.clone(),
                robust_target: c.id.clone(),
                ratio: ratio_metric(&normal, &surviving(m, set)),
            })
            .collect()
    }

    /// Runs one configured sweep and writes its curve.
    pub fn sweep(&self, sw: &SweepConfig, overrides: &AttackParams) -> Result<SweepCurve> {
        let parameter = SweepParam::parse(&sw.parameter)?;
        let attack: Attack = sw.attack.parse()?;
        let params = overrides.over(&sw.params.over(&self.config.attack.params));
        let base = params.config(attack, self.hw(), self.config.attack_seed())?;
        let grid = sw.grid.clone().unwrap_or_else(|| parameter.default_grid());
        let ensemble = self.ensemble()?;
        let ids = if sw.sources.is_empty() {
            vec![self
                .config
                .normal_ids()
                .into_iter()
                .next()
                .ok_or_else(|| Error::Config("sweep needs a normal model or explicit sources".into()))?]
        } else {
            sw.sources.clone()
        };
        let sources = ids.iter().map(|id| self.source(id, &ensemble)).collect::<Result<Vec<_>>>()?;
        let targets = self.zoo.targets();
        let curve = sweep(parameter, &grid, attack.name(), &base, &sources, &targets, &self.eval.images, &self.eval.labels)?;
        let mut report = self.new_report();
        report.sweeps.push(curve.clone());
        let name = format!("{}@{}.json", parameter.name(), attack.name());
        write_atomic(&self.config.run_dir().join("sweeps").join(name), report.to_json()?.as_bytes())?;
        Ok(curve)
    }
}

/// `D*` as persisted, tagged with schema and config hash.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoredSet {
    pub schema: String,
    pub config_hash: String,
    pub set: AdversarialSet,
}

/// Runs `preset` from `source` (a model id or `"ensemble"`).
pub fn cmd_attack(cfg: &ExperimentConfig, preset: &str, source: &str, overrides: &AttackParams) -> Result<TransferReport> {
    preset.parse::<Attack>()?;
    cfg.check_source(source)?;
    Workspace::open(cfg)?.attack(preset, source, overrides)
}

/// Runs every configured sweep (or the given ones).
pub fn cmd_sweep(cfg: &ExperimentConfig, sweeps: &[SweepConfig], overrides: &AttackParams) -> Result<Vec<SweepCurve>> {
    let ws = Workspace::open(cfg)?;
    sweeps.iter().map(|s| ws.sweep(s, overrides)).collect()
}

fn json_files(dir: &Path) -> Result<Vec<PathBuf>> {
    if !dir.exists() {
        return Ok(Vec::new());
    }
    let mut files: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    files.sort();
    Ok(files)
}

/// Merges every report and sweep in the run directory, adds cosine
/// similarity matrices for presets crafted from two or more single normal
/// sources, and writes `report.json` and `report.csv`.
pub fn cmd_report(cfg: &ExperimentConfig) -> Result<TransferReport> {
    let dir = cfg.run_dir();
    let mut parts = Vec::new();
    for sub in ["reports", "sweeps"] {
        for path in json_files(&dir.join(sub))? {
            parts.push(TransferReport::from_json(&fs::read_to_string(&path)?)?);
        }
    }
    let mut report = if parts.is_empty() {
        let dataset_hash = match fs::read(dir.join("dataset.dakd")) {
            Ok(bytes) => hex_digest(&bytes),
            Err(_) => String::new(),
        };
        TransferReport::new(&cfg.hash(), &dataset_hash, cfg.echo())
    } else {
        TransferReport::merge(&parts)?
    };
    if report.config_hash != cfg.hash() {
        return Err(Error::Schema(format!(
            "run artifacts belong to config {}, not {}",
            report.config_hash,
            cfg.hash()
        )));
    }

    let normal = cfg.normal_ids();
    let mut by_attack: BTreeMap<String, Vec<AdversarialSet>> = BTreeMap::new();
    for path in json_files(&dir.join("sets"))? {
        let stored: StoredSet = serde_json::from_slice(&fs::read(&path)?)?;
        if stored.schema != SET_SCHEMA {
            return Err(Error::Schema(format!("{} has schema {:?}", path.display(), stored.schema)));
        }
        if normal.contains(&stored.set.source) {
            by_attack.entry(stored.set.attack.clone()).or_default().push(stored.set);
        }
    }
    for sets in by_attack.values_mut() {
        if sets.len() >= 2 {
            sets.sort_by(|a, b| a.source.cmp(&b.source));
            report.similarity.push(perturbation_cosine(sets, &CosineScope::All)?);
        }
    }

    write_atomic(&dir.join("report.json"), report.to_json()?.as_bytes())?;
    write_atomic(&dir.join("report.csv"), report.to_csv().as_bytes())?;
    Ok(report)
}

/// Dataset, zoo, every configured preset from every configured source,
/// every sweep, then the merged report. Returns the run directory.
pub fn run_pipeline(cfg: &ExperimentConfig) -> Result<PathBuf> {
    let ws = Workspace::open(cfg)?;
    let sources = if cfg.attack.sources.is_empty() { cfg.normal_ids() } else { cfg.attack.sources.clone() };
    let none = AttackParams::default();
    for preset in &cfg.attack.presets {
        for source in &sources {
            ws.attack(preset, source, &none)?;
        }
    }
    for sw in &cfg.sweeps {
        ws.sweep(sw, &none)?;
    }
    cmd_report(cfg)?;
    Ok(cfg.run_dir())
}

#[cfg(test)]
mod tests {
    use super::*;

    const BASE: &str = r#"
seed = 3
[dataset]
kind = "blobs"
n = 60
hw = 4
classes = 2
spread = 0.05
[training]
epochs = 3
lr = 0.1
batch = 8
eval_steps = 2
[[model]]
id = "n0"
arch = "mlp:6"
[[model]]
id = "r0"
arch = "linear"
training = "pgd"
train_steps = 2
[attack]
presets = ["fgsm"]
eval_size = 5
"#;

    fn config(dir: &Path) -> ExperimentConfig {
        let mut c = ExperimentConfig::from_toml(BASE).unwrap();
        c.output = dir.to_path_buf();
        c
    }

    #[test]
    fn config_validation() {
        assert!(ExperimentConfig::from_toml(BASE).is_ok());
        let no_seed = BASE.replacen("seed = 3", "", 1);
        assert!(matches!(ExperimentConfig::from_toml(&no_seed), Err(Error::Config(_))));
        let unknown = BASE.replacen("seed = 3", "seed = 3\ncolour = 1", 1);
        assert!(matches!(ExperimentConfig::from_toml(&unknown), Err(Error::Config(_))));
        let bad_source = BASE.replacen("eval_size = 5", "eval_size = 5\nsources = [\"n9\"]", 1);
        assert!(matches!(ExperimentConfig::from_toml(&bad_source), Err(Error::Config(_))));
        let bad_preset = BASE.replacen("[\"fgsm\"]", "[\"cw\"]", 1);
        assert!(ExperimentConfig::from_toml(&bad_preset).is_err());
        let dup = format!("{BASE}\n[[model]]\nid = \"n0\"\narch = \"linear\"\n");
        assert!(ExperimentConfig::from_toml(&dup).is_err());
    }

    #[test]
    fn hash_ignores_output_dir() {
        let a = config(Path::new("/tmp/a"));
        let b = config(Path::new("/tmp/b"));
        assert_eq!(a.hash(), b.hash());
        let mut c = a.clone();
        c.seed = 4;
        assert_ne!(a.hash(), c.hash());
        assert_ne!(a.attack_seed(), a.train_seed());
    }

    #[test]
    fn overrides_respect_presets() {
        let p = AttackParams { iterations: Some(5), dim_prob: Some(0.0), kernel_radius: Some(2), ..Default::default() };
        assert_eq!(p.config(Attack::Fgsm, 8, 0).unwrap().iterations, 1);
        assert_eq!(p.config(Attack::MiFgsm, 8, 0).unwrap().iterations, 5);
        assert!(p.config(Attack::MiFgsm, 8, 0).unwrap().dim.is_none());
        assert_eq!(p.config(Attack::Dim, 8, 0).unwrap().dim.unwrap().p, 0.0);
        assert_eq!(p.config(Attack::Tim, 8, 0).unwrap().tim.unwrap().radius, 2);
        let u = AttackParams { noise: Some(NoiseChoice::Uniform), ..Default::default() };
        assert_eq!(u.config(Attack::DaMiFgsm, 8, 0).unwrap().noise, AttackConfig::UNIFORM_NOISE);
        let cli = AttackParams { epsilon: Some(0.1), ..Default::default() };
        let file = AttackParams { epsilon: Some(0.2), mu: Some(0.5), ..Default::default() };
        let merged = cli.over(&file);
        assert_eq!((merged.epsilon, merged.mu), (Some(0.1), Some(0.5)));
    }

    #[test]
    fn missing_dataset_file_fails_before_training() {
        let dir = tempfile::tempdir().unwrap();
        let mut c = config(dir.path());
        c.dataset.kind = DatasetKind::File;
        c.dataset.path = Some(dir.path().join("absent.dakd"));
        assert!(matches!(cmd_train(&c), Err(Error::Config(_))));
        assert!(!c.run_dir().join("models").exists());
    }

    #[test]
    fn empty_report_is_valid() {
        let dir = tempfile::tempdir().unwrap();
        let r = cmd_report(&config(dir.path())).unwrap();
        assert!(r.rows.is_empty());
        assert_eq!(r.schema, crate::analysis::REPORT_SCHEMA);
        let csv = fs::read_to_string(config(dir.path()).run_dir().join("report.csv")).unwrap();
        assert!(csv.starts_with("#schema="));
    }

    #[test]
    fn attack_rows_cover_every_target() {
        let dir = tempfile::tempdir().unwrap();
        let c = config(dir.path());
        let ws = Workspace::open(&c).unwrap();
        let r = ws.attack("fgsm", "n0", &AttackParams::default()).unwrap();
        assert_eq!(r.rows.len(), 2);
        assert_eq!(r.rows.iter().filter(|r| r.white_box).count(), 1);
        let e = ws.attack("fgsm", ENSEMBLE, &AttackParams::default()).unwrap();
        let wb: Vec<_> = e.rows.iter().filter(|r| r.white_box).map(|r| r.target.as_str()).collect();
        assert_eq!(wb, ["n0"]);
        assert!(c.run_dir().join("sets/fgsm@n0.json").exists());
    }
}
