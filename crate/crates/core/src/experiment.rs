//! Declarative experiment configuration and the end-to-end runners used by
//! the command line: teacher training, baseline and distilled students,
//! ablations and the temperature/weight sweep.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cnn::{
    build_alexnet_teacher, build_lenet_teacher, build_reduced_alexnet_teacher, NetworkSpec, Shape3,
};
use crate::data::{
    apply_normalizer, fit_normalizer_with, load_cifar10_dir, load_idx_dir, load_teacher_logits,
    split_train_val, subset, Dataset, Fnv, NormalizationMode, Split, TeacherLogits,
};
use crate::distill::DistillConfig;
use crate::encode::EncodingKind;
use crate::error::{Error, Result};
use crate::qsim::{build_student_circuit, MAX_QUBITS};
use crate::reduce::{PcaBasis, Reducer, ReducerKind, DEFAULT_HIDDEN_DIM};
use crate::stats::{self, Arm, Comparison, CountParameters, ExperimentReport, RunResult};
use crate::train::{
    evaluate_student, fit, fit_teacher, mix_seed, read_history, write_history, EpochRecord,
    Evaluation, GradientEngine, Readout, StudentModel, TrainLoopConfig, TrainedTeacher,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetKind {
    Mnist,
    FashionMnist,
    Cifar10,
}

impl DatasetKind {
    pub fn sample_shape(self) -> Shape3 {
        match self {
            DatasetKind::Mnist | DatasetKind::FashionMnist => Shape3::new(1, 28, 28),
            DatasetKind::Cifar10 => Shape3::new(3, 32, 32),
        }
    }
}

impl fmt::Display for DatasetKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DatasetKind::Mnist => "mnist",
            DatasetKind::FashionMnist => "fashionmnist",
            DatasetKind::Cifar10 => "cifar10",
        })
    }
}

impl FromStr for DatasetKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "mnist" => Ok(DatasetKind::Mnist),
            "fashionmnist" | "fashion-mnist" => Ok(DatasetKind::FashionMnist),
            "cifar10" | "cifar-10" => Ok(DatasetKind::Cifar10),
            other => Err(Error::Config(format!(
                "unknown dataset {other:?} (expected mnist, fashionmnist or cifar10)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum TeacherChoice {
    Lenet,
    Alexnet,
    /// AlexNet layout with filters and units divided by the given factor.
    ReducedAlexnet(usize),
    /// Precomputed logits file.
    Logits(PathBuf),
    None,
}

impl TeacherChoice {
    /// Network for natively trained teachers.
    pub fn network(&self, num_classes: usize) -> Result<Option<NetworkSpec>> {
        match self {
            TeacherChoice::Lenet => build_lenet_teacher(num_classes).map(Some),
            TeacherChoice::Alexnet => build_alexnet_teacher(num_classes).map(Some),
            TeacherChoice::ReducedAlexnet(d) => {
                build_reduced_alexnet_teacher(num_classes, *d).map(Some)
            }
            TeacherChoice::Logits(_) | TeacherChoice::None => Ok(None),
        }
    }
}

impl fmt::Display for TeacherChoice {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TeacherChoice::Lenet => f.write_str("lenet"),
            TeacherChoice::Alexnet => f.write_str("alexnet"),
            TeacherChoice::ReducedAlexnet(d) => write!(f, "alexnet/{d}"),
            TeacherChoice::Logits(p) => write!(f, "logits:{}", p.display()),
            TeacherChoice::None => f.write_str("none"),
        }
    }
}

impl FromStr for TeacherChoice {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let t = s.trim();
        if let Some(path) = t.strip_prefix("logits:") {
            if path.is_empty() {
                return Err(Error::Config("logits teacher needs a path".into()));
            }
            return Ok(TeacherChoice::Logits(PathBuf::from(path)));
        }
        if let Some(d) = t.strip_prefix("alexnet/") {
            return match d.parse::<usize>() {
                Ok(d) if d >= 1 => Ok(TeacherChoice::ReducedAlexnet(d)),
                _ => Err(Error::Config(format!("bad alexnet divisor {d:?}"))),
            };
        }
        match t.to_ascii_lowercase().as_str() {
            "lenet" => Ok(TeacherChoice::Lenet),
            "alexnet" => Ok(TeacherChoice::Alexnet),
            "none" => Ok(TeacherChoice::None),
            other => Err(Error::Config(format!(
                "unknown teacher {other:?} (expected lenet, alexnet, alexnet/N, logits:<path> or none)"
            ))),
        }
    }
}

impl Serialize for TeacherChoice {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for TeacherChoice {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        String::deserialize(d)?
            .parse()
            .map_err(serde::de::Error::custom)
    }
}

/// Fully resolved experiment settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub dataset: DatasetKind,
    pub data_root: PathBuf,
    pub per_class: usize,
    pub test_per_class: usize,
    /// Per-class size of the labelled pool natively trained teachers learn
    /// from; contains the student's training samples.
    pub teacher_per_class: usize,
    pub val_fraction: f64,
    pub normalization: NormalizationMode,
    /// Seed for the data subset, validation split and teacher training.
    pub data_seed: u64,
    pub qubits: usize,
    pub layers: usize,
    pub encoding: EncodingKind,
    pub reducer: ReducerKind,
    pub hidden_dim: usize,
    pub readout: Readout,
    pub teacher: TeacherChoice,
    pub tau: f64,
    pub alpha: f64,
    pub lr: f64,
    pub max_epochs: usize,
    pub patience: usize,
    pub batch_size: usize,
    pub teacher_max_epochs: usize,
    pub seeds: Vec<u64>,
    /// Shots per test-set evaluation; 0 evaluates analytically.
    pub shots: usize,
    /// Also train an α = 0 student per seed.
    pub baseline: bool,
    pub gradient_engine: GradientEngine,
    /// 0 disables gradient clipping.
    pub clip_norm: f64,
    pub output: PathBuf,
}

/// Raw file contents: every field optional so defaults can be filled and
/// all problems reported together.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    dataset: Option<String>,
    data_root: Option<PathBuf>,
    per_class: Option<usize>,
    test_per_class: Option<usize>,
    teacher_per_class: Option<usize>,
    val_fraction: Option<f64>,
    normalization: Option<String>,
    data_seed: Option<u64>,
    qubits: Option<usize>,
    layers: Option<usize>,
    encoding: Option<String>,
    reducer: Option<String>,
    hidden_dim: Option<usize>,
    readout: Option<String>,
    teacher: Option<String>,
    tau: Option<f64>,
    alpha: Option<f64>,
    lr: Option<f64>,
    max_epochs: Option<usize>,
    patience: Option<usize>,
    batch_size: Option<usize>,
    teacher_max_epochs: Option<usize>,
    seeds: Option<Vec<u64>>,
    shots: Option<usize>,
    baseline: Option<bool>,
    gradient_engine: Option<String>,
    clip_norm: Option<f64>,
    output: Option<PathBuf>,
}

pub const DEFAULT_TAU: f64 = 2.0;
pub const DEFAULT_ALPHA: f64 = 0.4;
pub const DEFAULT_TEACHER_PER_CLASS: usize = 400;
pub const DEFAULT_SEEDS: [u64; 5] = [1, 2, 3, 4, 5];

/// Parses TOML text, fills defaults and checks every constraint, returning
/// all violations at once.
pub fn validate_config(text: &str) -> std::result::Result<ExperimentConfig, Vec<String>> {
    let table: toml::Table = toml::from_str(text).map_err(|e| vec![format!("parse error: {e}")])?;
    validate_config_table(table)
}

/// As [`validate_config`], for an already parsed table (flag overrides are
/// merged into the table by the caller).
pub fn validate_config_table(
    table: toml::Table,
) -> std::result::Result<ExperimentConfig, Vec<String>> {
    let raw: RawConfig = toml::Value::Table(table)
        .try_into()
        .map_err(|e: toml::de::Error| vec![format!("invalid config: {}", e.message())])?;
    let mut errors = Vec::new();
    let mut parse = |what: &str, r: Result<()>| {
        if let Err(e) = r {
            errors.push(format!("{what}: {e}"));
        }
    };

    let mut dataset = DatasetKind::Mnist;
    if let Some(s) = &raw.dataset {
        parse("dataset", s.parse().map(|d| dataset = d));
    }
    let mut normalization = NormalizationMode::default();
    if let Some(s) = &raw.normalization {
        parse("normalization", s.parse().map(|n| normalization = n));
    }
    let mut encoding = EncodingKind::Amplitude;
    if let Some(s) = &raw.encoding {
        parse("encoding", s.parse().map(|e| encoding = e));
    }
    let mut reducer = ReducerKind::FullyConnected;
    if let Some(s) = &raw.reducer {
        parse("reducer", s.parse().map(|r| reducer = r));
    }
    let mut readout = Readout::LinearHead;
    if let Some(s) = &raw.readout {
        parse("readout", s.parse().map(|r| readout = r));
    }
    let mut teacher = TeacherChoice::Lenet;
    if let Some(s) = &raw.teacher {
        parse("teacher", s.parse().map(|t| teacher = t));
    }
    let mut gradient_engine = GradientEngine::Adjoint;
    if let Some(s) = &raw.gradient_engine {
        parse("gradient_engine", s.parse().map(|g| gradient_engine = g));
    }

    let cfg = ExperimentConfig {
        dataset,
        data_root: raw.data_root.clone().unwrap_or_default(),
        per_class: raw.per_class.unwrap_or(200),
        test_per_class: raw.test_per_class.unwrap_or(100),
        teacher_per_class: raw.teacher_per_class.unwrap_or(DEFAULT_TEACHER_PER_CLASS),
        val_fraction: raw.val_fraction.unwrap_or(0.1),
        normalization,
        data_seed: raw.data_seed.unwrap_or(0),
        qubits: raw.qubits.unwrap_or(4),
        layers: raw.layers.unwrap_or(2),
        encoding,
        reducer,
        hidden_dim: raw.hidden_dim.unwrap_or(DEFAULT_HIDDEN_DIM),
        readout,
        teacher,
        tau: raw.tau.unwrap_or(DEFAULT_TAU),
        alpha: raw.alpha.unwrap_or(DEFAULT_ALPHA),
        lr: raw.lr.unwrap_or(crate::train::DEFAULT_LEARNING_RATE),
        max_epochs: raw.max_epochs.unwrap_or(crate::train::DEFAULT_MAX_EPOCHS),
        patience: raw.patience.unwrap_or(crate::train::DEFAULT_PATIENCE),
        batch_size: raw.batch_size.unwrap_or(crate::train::DEFAULT_BATCH_SIZE),
        teacher_max_epochs: raw
            .teacher_max_epochs
            .unwrap_or(crate::train::DEFAULT_MAX_EPOCHS),
        seeds: raw.seeds.clone().unwrap_or_else(|| DEFAULT_SEEDS.to_vec()),
        shots: raw.shots.unwrap_or(crate::qsim::DEFAULT_SHOTS),
        baseline: raw.baseline.unwrap_or(true),
        gradient_engine,
        clip_norm: raw.clip_norm.unwrap_or(crate::train::DEFAULT_CLIP_NORM),
        output: raw
            .output
            .clone()
            .unwrap_or_else(|| PathBuf::from("runs/experiment")),
    };

    if raw.data_root.is_none() {
        errors.push("data_root: required (dataset directory)".into());
    }
    errors.extend(cfg.constraint_errors());
    if errors.is_empty() {
        Ok(cfg)
    } else {
        Err(errors)
    }
}

impl ExperimentConfig {
    /// Defaults for everything except the data location.
    pub fn with_data_root(data_root: impl Into<PathBuf>) -> Self {
        let mut t = toml::Table::new();
        t.insert(
            "data_root".into(),
            toml::Value::String(data_root.into().to_string_lossy().into_owned()),
        );
        validate_config_table(t).expect("defaults are valid")
    }

    /// Cross-field checks, one message per violation.
    pub fn constraint_errors(&self) -> Vec<String> {
        let mut e = Vec::new();
        let shape = self.dataset.sample_shape();
        if !(1..=MAX_QUBITS).contains(&self.qubits) {
            e.push(format!("qubits: {} outside 1..={MAX_QUBITS}", self.qubits));
        }
        if self.layers == 0 {
            e.push("layers: must be at least 1".into());
        }
        if self.per_class == 0 || self.test_per_class == 0 {
            e.push("per_class / test_per_class: must be positive".into());
        }
        if self.teacher_per_class < self.per_class {
            e.push(format!(
                "teacher_per_class: {} is smaller than per_class {}",
                self.teacher_per_class, self.per_class
            ));
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            e.push(format!(
                "val_fraction: {} outside (0, 1)",
                self.val_fraction
            ));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            e.push(format!("tau: {} must be positive", self.tau));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            e.push(format!("alpha: {} outside [0, 1]", self.alpha));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            e.push(format!("lr: {} must be positive", self.lr));
        }
        if self.patience == 0 {
            e.push("patience: must be at least 1".into());
        }
        if self.max_epochs == 0 || self.teacher_max_epochs == 0 || self.batch_size == 0 {
            e.push("max_epochs / teacher_max_epochs / batch_size: must be positive".into());
        }
        if self.hidden_dim == 0 && self.reducer == ReducerKind::FullyConnected {
            e.push("hidden_dim: must be positive for the fc reducer".into());
        }
        if self.clip_norm < 0.0 || !self.clip_norm.is_finite() {
            e.push(format!("clip_norm: {} must be >= 0", self.clip_norm));
        }
        if self.seeds.is_empty() {
            e.push("seeds: at least one seed required".into());
        }
        let mut s = self.seeds.clone();
        s.sort_unstable();
        s.dedup();
        if s.len() != self.seeds.len() {
            e.push("seeds: duplicates are not allowed".into());
        }
        if self.teacher == TeacherChoice::None && self.alpha > 0.0 {
            e.push(format!(
                "alpha: distillation weight without teacher (alpha = {} needs a teacher)",
                self.alpha
            ));
        }
        if self.dataset == DatasetKind::Cifar10
            && matches!(
                self.teacher,
                TeacherChoice::Lenet | TeacherChoice::Alexnet | TeacherChoice::ReducedAlexnet(_)
            )
        {
            e.push("teacher: native teachers take 1x28x28 inputs; use logits:<path> or none for cifar10".into());
        }
        if self.reducer != ReducerKind::FullyConnected && self.encoding != EncodingKind::Amplitude {
            e.push(format!(
                "reducer: {} is only supported with amplitude encoding ({} requested)",
                self.reducer, self.encoding
            ));
        }
        if self.qubits <= MAX_QUBITS {
            let target = self.encoding.input_dim(self.qubits);
            if let Err(err) = Reducer::new(self.reducer, shape, target, self.hidden_dim.max(1)) {
                e.push(format!("reducer: {err}"));
            }
            if self.readout == Readout::BasisProbs
                && (1usize << self.qubits) < crate::data::NUM_CLASSES
            {
                e.push(format!(
                    "readout: basis-probs needs 2^qubits >= {} classes",
                    crate::data::NUM_CLASSES
                ));
            }
        }
        e
    }

    /// Reducer output size implied by encoding and qubit count.
    pub fn target_dim(&self) -> usize {
        self.encoding.input_dim(self.qubits)
    }

    pub fn distill_config(&self) -> Result<DistillConfig> {
        DistillConfig::new(self.tau, self.alpha)
    }

    pub fn loop_config(&self, seed: u64) -> TrainLoopConfig {
        TrainLoopConfig {
            max_epochs: self.max_epochs,
            patience: self.patience,
            batch_size: self.batch_size,
            seed,
            gradient_engine: self.gradient_engine,
            optimizer: crate::train::OptimizerKind::Adam,
            learning_rate: self.lr,
            clip_norm: (self.clip_norm > 0.0).then_some(self.clip_norm),
        }
    }

    /// Hash of every setting except the output directory.
    pub fn fingerprint(&self) -> String {
        let mut c = self.clone();
        c.output = PathBuf::new();
        let json = serde_json::to_string(&c).expect("config serializes");
        let mut h = Fnv::new();
        h.write(json.as_bytes());
        format!("{:016x}", h.finish())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

/// Normalized splits shared by every run.
#[derive(Debug, Clone)]
pub struct PreparedData {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
    /// Teacher training pool: a superset of `train`, disjoint from `val`.
    pub teacher_train: Dataset,
}

impl PreparedData {
    /// Subsets, splits and z-scores with statistics from the training part.
    pub fn from_raw(
        full_train: &Dataset,
        full_test: &Dataset,
        cfg: &ExperimentConfig,
    ) -> Result<Self> {
        let teacher_pool = subset(
            full_train,
            cfg.teacher_per_class.max(cfg.per_class),
            cfg.data_seed,
        )?;
        let pool = subset(&teacher_pool, cfg.per_class, cfg.data_seed)?;
        let test = subset(
            full_test,
            cfg.test_per_class,
            mix_seed(cfg.data_seed, 0x7E57),
        )?
        .with_split(Split::Test);
        let (train, val) = split_train_val(&pool, cfg.val_fraction, cfg.data_seed)?;
        let held_out: std::collections::HashSet<usize> = val.keys().iter().copied().collect();
        let keep: Vec<usize> = (0..teacher_pool.len())
            .filter(|&i| !held_out.contains(&teacher_pool.keys()[i]))
            .collect();
        let teacher_train = teacher_pool.select(&keep);
        let norm = fit_normalizer_with(&train, cfg.normalization)?;
        if !norm.zero_std.is_empty() {
            log::info!(
                "{} constant feature(s) in the training split map to 0",
                norm.zero_std.len()
            );
        }
        Ok(Self {
            train: apply_normalizer(&train, &norm)?,
            val: apply_normalizer(&val, &norm)?,
            test: apply_normalizer(&test, &norm)?,
            teacher_train: apply_normalizer(&teacher_train, &norm)?,
        })
    }

    pub fn load(cfg: &ExperimentConfig) -> Result<Self> {
        let (train, test) = load_dataset(cfg.dataset, &cfg.data_root)?;
        Self::from_raw(&train, &test, cfg)
    }

    pub fn zero_std_features(&self) -> usize {
        self.train.normalization().map_or(0, |n| n.zero_std.len())
    }
}

/// Full train and test splits from `root`.
pub fn load_dataset(kind: DatasetKind, root: &Path) -> Result<(Dataset, Dataset)> {
    match kind {
        DatasetKind::Mnist | DatasetKind::FashionMnist => Ok((
            load_idx_dir(root, Split::Train)?,
            load_idx_dir(root, Split::Test)?,
        )),
        DatasetKind::Cifar10 => Ok((
            load_cifar10_dir(root, Split::Train)?,
            load_cifar10_dir(root, Split::Test)?,
        )),
    }
}

/// A teacher as used for distillation: logits for the training samples and,
/// for native teachers, the trained network.
#[derive(Debug, Clone)]
pub struct TeacherArtifacts {
    pub logits: TeacherLogits,
    pub trained: Option<TrainedTeacher>,
    pub test_accuracy: Option<f64>,
    /// Per-epoch teacher training records; empty for external logits.
    pub history: Vec<EpochRecord>,
}

/// Trains (or reloads from `cache_dir`) the configured teacher.
pub fn prepare_teacher(
    cfg: &ExperimentConfig,
    data: &PreparedData,
    cache_dir: Option<&Path>,
) -> Result<Option<TeacherArtifacts>> {
    if let TeacherChoice::Logits(path) = &cfg.teacher {
        return Ok(Some(TeacherArtifacts {
            logits: load_teacher_logits(path, &data.train)?,
            trained: None,
            test_accuracy: None,
            history: Vec::new(),
        }));
    }
    let Some(net) = cfg.teacher.network(data.train.num_classes())? else {
        return Ok(None);
    };
    let loop_cfg = TrainLoopConfig {
        max_epochs: cfg.teacher_max_epochs,
        ..cfg.loop_config(mix_seed(cfg.data_seed, 0x7EAC4E5))
    };
    let key = teacher_cache_key(cfg, &net, data);
    let cached = cache_dir.map(|d| {
        d.join(format!(
            "teacher-{}-{key}.qdck",
            net.name().replace('/', "-")
        ))
    });
    let history_path = cached.as_ref().map(|p| p.with_extension("jsonl"));
    let reusable = cached
        .as_deref()
        .zip(history_path.as_deref())
        .filter(|(c, h)| c.is_file() && h.is_file());
    let (teacher, history) = match reusable {
        Some((path, hist)) => {
            log::info!("reusing teacher checkpoint {}", path.display());
            (TrainedTeacher::load(net, path)?, read_history(hist)?)
        }
        None => {
            log::info!(
                "training {} teacher ({} parameters)",
                net.name(),
                net.num_params()
            );
            let fitted = fit_teacher(&net, &data.teacher_train, &data.val, &loop_cfg)?;
            if let (Some(path), Some(hist)) = (&cached, &history_path) {
                fitted.model.save(path)?;
                write_history(hist, &fitted.history)?;
            }
            (fitted.model, fitted.history)
        }
    };
    let test_accuracy = teacher.evaluate(&data.test)?.accuracy;
    log::info!(
        "teacher {} test accuracy {:.4}",
        net_name(&teacher),
        test_accuracy
    );
    Ok(Some(TeacherArtifacts {
        logits: teacher.logits_table(&data.train)?,
        trained: Some(teacher),
        test_accuracy: Some(test_accuracy),
        history,
    }))
}

fn net_name(t: &TrainedTeacher) -> &str {
    t.net.name()
}

fn teacher_cache_key(cfg: &ExperimentConfig, net: &NetworkSpec, data: &PreparedData) -> String {
    let mut h = Fnv::new();
    h.write(net.name().as_bytes());
    h.write(&data.teacher_train.fingerprint().to_le_bytes());
    h.write(&data.val.fingerprint().to_le_bytes());
    for v in [
        cfg.lr,
        cfg.teacher_max_epochs as f64,
        cfg.patience as f64,
        cfg.batch_size as f64,
        cfg.clip_norm,
    ] {
        h.write(&v.to_bits().to_le_bytes());
    }
    h.write(&cfg.data_seed.to_le_bytes());
    format!("{:016x}", h.finish())
}

/// Builds the configured student, fitting PCA on the training split when
/// needed (reusing `pca` if given).
pub fn build_student(
    cfg: &ExperimentConfig,
    data: &PreparedData,
    seed: u64,
    pca: Option<&PcaBasis>,
) -> Result<StudentModel> {
    let mut reducer = Reducer::new(
        cfg.reducer,
        data.train.sample_shape(),
        cfg.target_dim(),
        cfg.hidden_dim,
    )?;
    if cfg.reducer == ReducerKind::Pca {
        match pca {
            Some(b) => reducer.set_pca_basis(b.clone())?,
            None => reducer.fit(data.train.images().data())?,
        }
    }
    StudentModel::new(
        reducer,
        cfg.encoding,
        build_student_circuit(cfg.qubits, cfg.layers)?,
        cfg.readout,
        data.train.num_classes(),
        seed,
    )
}

/// PCA basis for the configured reducer, cached on disk keyed by data and dimension.
pub fn prepare_pca(
    cfg: &ExperimentConfig,
    data: &PreparedData,
    cache_dir: Option<&Path>,
) -> Result<Option<PcaBasis>> {
    if cfg.reducer != ReducerKind::Pca {
        return Ok(None);
    }
    let path = cache_dir.map(|d| {
        d.join(format!(
            "pca-{}-{:016x}-{}.qdck",
            cfg.dataset,
            data.train.fingerprint(),
            cfg.target_dim()
        ))
    });
    if let Some(p) = path.as_deref().filter(|p| p.is_file()) {
        return PcaBasis::load(p).map(Some);
    }
    let mut reducer = Reducer::new(
        ReducerKind::Pca,
        data.train.sample_shape(),
        cfg.target_dim(),
        0,
    )?;
    reducer.fit(data.train.images().data())?;
    let basis = reducer.pca_basis().expect("fitted").clone();
    if let Some(p) = &path {
        basis.save(p)?;
    }
    Ok(Some(basis))
}

/// Outcome of training and testing one student.
#[derive(Debug, Clone)]
pub struct StudentRun {
    pub result: RunResult,
    pub evaluation: Evaluation,
    pub model: StudentModel,
}

/// Trains one student with `cfg`'s τ/α (teacher required when α > 0) and
/// evaluates it on the test split.
pub fn train_student(
    cfg: &ExperimentConfig,
    data: &PreparedData,
    teacher: Option<&TeacherLogits>,
    seed: u64,
    pca: Option<&PcaBasis>,
    out_dir: Option<&Path>,
) -> Result<StudentRun> {
    let model = build_student(cfg, data, seed, pca)?;
    let distill = cfg.distill_config()?;
    let teacher = if distill.alpha > 0.0 { teacher } else { None };
    let fitted = fit(
        model,
        &data.train,
        &data.val,
        teacher,
        &distill,
        &cfg.loop_config(seed),
    )?;
    let shots = (cfg.shots > 0).then_some((cfg.shots, mix_seed(seed, 0x5407)));
    let evaluation = evaluate_student(&fitted.model, &data.test, shots)?;
    if let Some(dir) = out_dir {
        fitted.model.save(&dir.join("student.qdck"))?;
        write_history(&dir.join("history.jsonl"), &fitted.history)?;
    }
    let result = RunResult {
        seed,
        accuracy: evaluation.accuracy,
        config_fingerprint: cfg.fingerprint(),
        epochs: fitted.history.len(),
        best_val_accuracy: fitted.best_val_accuracy,
        final_train_loss: fitted.history.last().map_or(f64::NAN, |h| h.train_loss),
    };
    log::info!(
        "seed {seed}: α = {} test accuracy {:.4} after {} epochs (best val {:.4} at epoch {})",
        distill.alpha,
        evaluation.accuracy,
        fitted.history.len(),
        fitted.best_val_accuracy,
        fitted.best_epoch
    );
    Ok(StudentRun {
        result,
        evaluation,
        model: fitted.model,
    })
}

fn run_dir(out: Option<&Path>, arm: &str, seed: u64) -> Option<PathBuf> {
    out.map(|o| o.join(arm).join(format!("seed-{seed}")))
}

fn write_config(cfg: &ExperimentConfig) -> Result<()> {
    std::fs::create_dir_all(&cfg.output).map_err(|e| Error::io(&cfg.output, e))?;
    let p = cfg.output.join("config.toml");
    std::fs::write(&p, cfg.to_toml()).map_err(|e| Error::io(&p, e))
}

/// Baseline and distilled students for every seed, with the teacher trained
/// once. Writes checkpoints, histories and report files under `cfg.output`.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentReport> {
    let errs = cfg.constraint_errors();
    if !errs.is_empty() {
        return Err(Error::Config(errs.join("; ")));
    }
    let data = PreparedData::load(cfg)?;
    let report = run_experiment_on(cfg, &data, true)?;
    stats::emit_report(&report, &cfg.output)?;
    Ok(report)
}

/// [`run_experiment`] on prepared data; `write` controls all file output.
pub fn run_experiment_on(
    cfg: &ExperimentConfig,
    data: &PreparedData,
    write: bool,
) -> Result<ExperimentReport> {
    let errs = cfg.constraint_errors();
    if !errs.is_empty() {
        return Err(Error::Config(errs.join("; ")));
    }
    let out = write.then_some(cfg.output.as_path());
    if write {
        write_config(cfg)?;
    }
    let teacher = if cfg.alpha > 0.0 {
        prepare_teacher(cfg, data, out)?
    } else {
        None
    };
    let pca = prepare_pca(cfg, data, out)?;

    let mut arms_wanted: Vec<(&str, f64)> = Vec::new();
    if cfg.baseline || cfg.alpha == 0.0 {
        arms_wanted.push(("baseline", 0.0));
    }
    if cfg.alpha > 0.0 {
        arms_wanted.push(("distilled", cfg.alpha));
    }
    let jobs: Vec<(usize, u64)> = (0..arms_wanted.len())
        .flat_map(|a| cfg.seeds.iter().map(move |&s| (a, s)))
        .collect();
    let runs: Vec<StudentRun> = jobs
        .par_iter()
        .map(|&(a, seed)| {
            let (label, alpha) = arms_wanted[a];
            let arm_cfg = ExperimentConfig {
                alpha,
                ..cfg.clone()
            };
            train_student(
                &arm_cfg,
                data,
                teacher.as_ref().map(|t| &t.logits),
                seed,
                pca.as_ref(),
                run_dir(out, label, seed).as_deref(),
            )
        })
        .collect::<Result<_>>()?;

    let mut report = ExperimentReport::new(
        format!("{} {}q", cfg.dataset, cfg.qubits),
        cfg.fingerprint(),
    );
    let mut first_eval: Vec<Option<Evaluation>> = vec![None; arms_wanted.len()];
    for (a, (label, _)) in arms_wanted.iter().enumerate() {
        let mut arm = Arm {
            label: label.to_string(),
            runs: Vec::new(),
        };
        for (&(ja, _), run) in jobs.iter().zip(&runs) {
            if ja == a {
                if first_eval[a].is_none() {
                    first_eval[a] = Some(run.evaluation.clone());
                }
                arm.runs.push(run.result.clone());
            }
        }
        report.arms.push(arm);
    }
    if report.arms.len() == 2 {
        let per_sample = match (&first_eval[0], &first_eval[1]) {
            (Some(b), Some(d)) => Some(stats::mcnemar_test(&d.correct, &b.correct)?),
            _ => None,
        };
        report.comparisons.push(Comparison::between(
            &report.arms[0],
            &report.arms[1],
            per_sample,
        )?);
        report.notes.push(format!(
            "per-sample McNemar test uses seed {} only",
            cfg.seeds[0]
        ));
    }
    if let Some(run) = runs.first() {
        report.parameter_counts.push((
            format!("student ({} {} {})", cfg.reducer, cfg.encoding, cfg.readout),
            run.model.parameter_counts(),
        ));
    }
    if let Some(t) = &teacher {
        if let Some(trained) = &t.trained {
            report.parameter_counts.push((
                format!("teacher {}", trained.net.name()),
                trained.net.parameter_counts(),
            ));
        }
        if let Some(acc) = t.test_accuracy {
            report.arms.push(Arm {
                label: format!("teacher ({})", cfg.teacher),
                runs: vec![RunResult {
                    seed: cfg.data_seed,
                    accuracy: acc,
                    config_fingerprint: cfg.fingerprint(),
                    epochs: t.history.len(),
                    best_val_accuracy: t.history.iter().map(|r| r.val_accuracy).fold(0.0, f64::max),
                    final_train_loss: t.history.last().map_or(0.0, |r| r.train_loss),
                }],
            });
        }
    }
    let zero = data.zero_std_features();
    if zero > 0 {
        report.notes.push(format!(
            "{zero} zero-variance input feature(s) normalized to 0"
        ));
    }
    Ok(report)
}

/// One arm per variant of `cfg`, all at α = 0 with a shared data split.
fn run_ablation(
    name: &str,
    base: &ExperimentConfig,
    data: &PreparedData,
    variants: Vec<(String, ExperimentConfig)>,
    write: bool,
) -> Result<ExperimentReport> {
    for (label, v) in &variants {
        let errs = v.constraint_errors();
        if !errs.is_empty() {
            return Err(Error::Config(format!("{label}: {}", errs.join("; "))));
        }
    }
    if write {
        write_config(base)?;
    }
    let out = write.then_some(base.output.as_path());
    let pcas: Vec<Option<PcaBasis>> = variants
        .iter()
        .map(|(_, v)| prepare_pca(v, data, out))
        .collect::<Result<_>>()?;
    let jobs: Vec<(usize, u64)> = (0..variants.len())
        .flat_map(|a| base.seeds.iter().map(move |&s| (a, s)))
        .collect();
    let runs: Vec<StudentRun> = jobs
        .par_iter()
        .map(|&(a, seed)| {
            let (label, v) = &variants[a];
            train_student(
                v,
                data,
                None,
                seed,
                pcas[a].as_ref(),
                run_dir(out, label, seed).as_deref(),
            )
        })
        .collect::<Result<_>>()?;
    let mut report = ExperimentReport::new(name, base.fingerprint());
    for (a, (label, _)) in variants.iter().enumerate() {
        let arm_runs: Vec<&StudentRun> = jobs
            .iter()
            .zip(&runs)
            .filter(|((ja, _), _)| *ja == a)
            .map(|(_, r)| r)
            .collect();
        report.arms.push(Arm {
            label: label.clone(),
            runs: arm_runs.iter().map(|r| r.result.clone()).collect(),
        });
        if let Some(r) = arm_runs.first() {
            report
                .parameter_counts
                .push((format!("student {label}"), r.model.parameter_counts()));
        }
    }
    report
        .notes
        .push("ablation arms train without distillation (alpha = 0)".into());
    Ok(report)
}

/// Students differing only in encoding (fc reducer, α = 0).
pub fn ablate_encodings(
    base: &ExperimentConfig,
    encodings: &[EncodingKind],
    data: &PreparedData,
    write: bool,
) -> Result<ExperimentReport> {
    let variants = encodings
        .iter()
        .map(|&e| {
            (
                e.to_string(),
                ExperimentConfig {
                    encoding: e,
                    reducer: ReducerKind::FullyConnected,
                    alpha: 0.0,
                    ..base.clone()
                },
            )
        })
        .collect();
    run_ablation("encoding ablation", base, data, variants, write)
}

/// Students differing only in reducer (amplitude encoding, α = 0).
pub fn ablate_reducers(
    base: &ExperimentConfig,
    reducers: &[ReducerKind],
    data: &PreparedData,
    write: bool,
) -> Result<ExperimentReport> {
    let variants = reducers
        .iter()
        .map(|&r| {
            (
                r.to_string(),
                ExperimentConfig {
                    reducer: r,
                    encoding: EncodingKind::Amplitude,
                    alpha: 0.0,
                    ..base.clone()
                },
            )
        })
        .collect();
    run_ablation("reducer ablation", base, data, variants, write)
}

pub const SWEEP_TAUS: [f64; 3] = [1.0, 2.0, 5.0];
pub const SWEEP_ALPHAS: [f64; 10] = [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub tau: f64,
    pub alpha: f64,
    /// Mean best validation accuracy over seeds.
    pub val_accuracy: f64,
    pub test_accuracy: f64,
}

/// Validation accuracy over a τ × α grid with one shared teacher.
pub fn run_sweep(
    base: &ExperimentConfig,
    taus: &[f64],
    alphas: &[f64],
    data: &PreparedData,
    write: bool,
) -> Result<Vec<SweepCell>> {
    if taus.is_empty() || alphas.is_empty() {
        return Err(Error::Config("sweep grid is empty".into()));
    }
    let mut probe = base.clone();
    probe.alpha = alphas.iter().cloned().fold(0.0, f64::max);
    let errs = probe.constraint_errors();
    if !errs.is_empty() {
        return Err(Error::Config(errs.join("; ")));
    }
    let out = write.then_some(base.output.as_path());
    if write {
        write_config(base)?;
    }
    let teacher = prepare_teacher(&probe, data, out)?;
    let pca = prepare_pca(base, data, out)?;
    let cells: Vec<(f64, f64)> = taus
        .iter()
        .flat_map(|&t| alphas.iter().map(move |&a| (t, a)))
        .collect();
    let jobs: Vec<(usize, u64)> = (0..cells.len())
        .flat_map(|c| base.seeds.iter().map(move |&s| (c, s)))
        .collect();
    let runs: Vec<StudentRun> = jobs
        .par_iter()
        .map(|&(c, seed)| {
            let (tau, alpha) = cells[c];
            let cfg = ExperimentConfig {
                tau,
                alpha,
                ..base.clone()
            };
            train_student(
                &cfg,
                data,
                teacher.as_ref().map(|t| &t.logits),
                seed,
                pca.as_ref(),
                None,
            )
        })
        .collect::<Result<_>>()?;
    let table: Vec<SweepCell> = cells
        .iter()
        .enumerate()
        .map(|(c, &(tau, alpha))| {
            let rs: Vec<&RunResult> = jobs
                .iter()
                .zip(&runs)
                .filter(|((jc, _), _)| *jc == c)
                .map(|(_, r)| &r.result)
                .collect();
            SweepCell {
                tau,
                alpha,
                val_accuracy: stats::mean(
                    &rs.iter().map(|r| r.best_val_accuracy).collect::<Vec<_>>(),
                ),
                test_accuracy: stats::mean(&rs.iter().map(|r| r.accuracy).collect::<Vec<_>>()),
            }
        })
        .collect();
    if write {
        write_sweep(&base.output.join("sweep.csv"), &table)?;
    }
    Ok(table)
}

pub fn write_sweep(path: &Path, cells: &[SweepCell]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::io(path, e.into()))?;
    for c in cells {
        w.serialize(c)
            .map_err(|e| Error::format(path, 0, e.to_string()))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_sweep(path: &Path) -> Result<Vec<SweepCell>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::io(path, e.into()))?;
    r.deserialize()
        .map(|c| c.map_err(|e| Error::format(path, 0, e.to_string())))
        .collect()
}

/// Validation accuracy (%) as a τ × α grid, one row per τ.
pub fn sweep_table(cells: &[SweepCell]) -> String {
    let mut taus: Vec<f64> = Vec::new();
    let mut alphas: Vec<f64> = Vec::new();
    for c in cells {
        if !taus.contains(&c.tau) {
            taus.push(c.tau);
        }
        if !alphas.contains(&c.alpha) {
            alphas.push(c.alpha);
        }
    }
    let mut s = String::from("validation accuracy (%)\n  tau \\ alpha");
    for a in &alphas {
        s.push_str(&format!(" {a:>6}"));
    }
    s.push('\n');
    for t in &taus {
        s.push_str(&format!("  {t:<11}"));
        for a in &alphas {
            match cells.iter().find(|c| c.tau == *t && c.alpha == *a) {
                Some(c) => s.push_str(&format!(" {:>6.2}", 100.0 * c.val_accuracy)),
                None => s.push_str(&format!(" {:>6}", "-")),
            }
        }
        s.push('\n');
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_config_needs_only_data_root() {
        let errs = validate_config("").unwrap_err();
        assert_eq!(errs.len(), 1, "{errs:?}");
        assert!(errs[0].contains("data_root"));
        let cfg = validate_config("data_root = \"/x\"").unwrap();
        assert_eq!(
            (cfg.tau, cfg.alpha, cfg.lr, cfg.patience, cfg.shots),
            (2.0, 0.4, 0.001, 10, 1024)
        );
        assert_eq!(cfg.max_epochs, 1000);
        assert_eq!(cfg.target_dim(), 16);
        assert_eq!(cfg.teacher, TeacherChoice::Lenet);
        assert_eq!(cfg.normalization, NormalizationMode::PerChannel);
        assert!(validate_config("data_root = \"/x\"\nper_class = 500").is_err());
    }

    #[test]
    fn cross_field_errors_are_aggregated() {
        let errs = validate_config(
            "data_root = \"/x\"\nteacher = \"none\"\nreducer = \"pca\"\nencoding = \"angle\"\nreadout = \"basis-probs\"\nqubits = 3\n",
        )
        .unwrap_err();
        let joined = errs.join("\n");
        assert!(
            joined.contains("distillation weight without teacher"),
            "{joined}"
        );
        assert!(joined.contains("only supported with amplitude"), "{joined}");
        assert!(joined.contains("basis-probs"), "{joined}");
        assert!(validate_config("data_root = \"/x\"\nbogus = 1").is_err());
        assert!(validate_config("data_root = \"/x\"\nseeds = [1, 1]").is_err());
        assert!(validate_config("data_root = \"/x\"\nteacher = \"none\"\nalpha = 0.0").is_ok());
    }

    #[test]
    fn pooled_reducers_need_square_targets() {
        assert!(validate_config("data_root = \"/x\"\nreducer = \"avgpool\"\nqubits = 5").is_err());
        assert!(validate_config("data_root = \"/x\"\nreducer = \"avgpool\"\nqubits = 8").is_ok());
    }

    #[test]
    fn teacher_strings() {
        for s in ["lenet", "alexnet", "alexnet/8", "logits:/tmp/t.txt", "none"] {
            assert_eq!(s.parse::<TeacherChoice>().unwrap().to_string(), s);
        }
        assert!("alexnet/0".parse::<TeacherChoice>().is_err());
        assert!("resnet".parse::<TeacherChoice>().is_err());
    }

    #[test]
    fn fingerprint_ignores_output_only() {
        let a = ExperimentConfig::with_data_root("/x");
        let mut b = a.clone();
        b.output = PathBuf::from("/elsewhere");
        assert_eq!(a.fingerprint(), b.fingerprint());
        b.tau = 5.0;
        assert_ne!(a.fingerprint(), b.fingerprint());
        let back = validate_config(&a.to_toml()).unwrap();
        assert_eq!(back, a);
    }

    #[test]
    fn sweep_table_layout() {
        let cell = |tau, alpha, v| SweepCell {
            tau,
            alpha,
            val_accuracy: v,
            test_accuracy: 0.0,
        };
        let t = sweep_table(&[
            cell(1.0, 0.1, 0.5),
            cell(1.0, 0.2, 0.625),
            cell(2.0, 0.1, 0.75),
        ]);
        let lines: Vec<&str> = t.lines().collect();
        assert_eq!(lines.len(), 4);
        assert!(lines[1].ends_with("0.1    0.2"), "{t}");
        assert!(lines[2].ends_with(" 50.00  62.50"), "{t}");
        assert!(lines[3].ends_with(" 75.00      -"), "{t}");
    }
}
