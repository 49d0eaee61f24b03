//! Experiment configuration: a flat `key = value` text file.
//!
//! One entry per line, `#` starts a comment, blank lines are ignored. The
//! value is everything after the first `=`, trimmed, so model specs such as
//! `input=3x8x8 stages=8x1,16x1/2 classes=4` need no quoting. Later entries
//! override earlier ones; `--set key=value` on the command line is applied
//! after the file. Unknown keys and unparsable values are configuration
//! errors.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::contrastive::{CriticNorm, CriticParams, NegativeSource, DEFAULT_BANK_MOMENTUM, DEFAULT_TAU, DESK_NEGATIVES};
use crate::data::{load_with_sidecar, Dataset, SyntheticConfig};
use crate::error::{Error, Result};
use crate::harness::schedule::TrainingSchedule;
use crate::harness::train::{DistillOptions, RunOptions};
use crate::losses::{LossConfig, DEFAULT_RHO};
use crate::mapping::{MappingKind, MappingStrategy};
use crate::model::ModelSpec;
use crate::projection::{HeadKind, DEFAULT_EMBED_DIM};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    TrainTeacher,
    Distill,
    TransferDistill,
    FinetuneLinear,
    Eval,
}

impl Mode {
    pub const ALL: [Mode; 5] = [Mode::TrainTeacher, Mode::Distill, Mode::TransferDistill, Mode::FinetuneLinear, Mode::Eval];

    pub fn as_str(self) -> &'static str {
        match self {
            Mode::TrainTeacher => "train_teacher",
            Mode::Distill => "distill",
            Mode::TransferDistill => "transfer_distill",
            Mode::FinetuneLinear => "finetune_linear",
            Mode::Eval => "eval",
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Mode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown mode `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DataSource {
    Synthetic,
    Raw,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScheduleKind {
    /// 30 epochs, decays at 15, 22, 27.
    Desk,
    /// 240 epochs, decays at 150, 180, 210.
    Full,
}

/// Synthetic-task settings; see [`SyntheticConfig`].
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSettings {
    pub classes: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub shape: [usize; 3],
    pub prototype_seed: u64,
    pub train_seed: u64,
    pub test_seed: u64,
    pub noise: f64,
    pub jitter: f64,
    pub blobs: usize,
    pub amplitude_spread: f64,
}

impl Default for SyntheticSettings {
    fn default() -> Self {
        Self {
            classes: 4,
            train_per_class: 100,
            test_per_class: 50,
            shape: [3, 8, 8],
            prototype_seed: 42,
            train_seed: 1,
            test_seed: 2,
            noise: 0.05,
            jitter: 0.3,
            blobs: 2,
            amplitude_spread: 0.3,
        }
    }
}

impl SyntheticSettings {
    fn generator(&self, per_class: usize) -> SyntheticConfig {
        SyntheticConfig {
            blobs_per_class: self.blobs,
            jitter: self.jitter,
            amplitude_spread: self.amplitude_spread,
            noise: self.noise,
            ..SyntheticConfig::new(self.classes, per_class, self.shape, self.prototype_seed)
        }
    }

    pub fn train(&self) -> Result<Dataset> {
        self.generator(self.train_per_class).generate(self.train_seed, "train")
    }

    pub fn test(&self) -> Result<Dataset> {
        self.generator(self.test_per_class).generate(self.test_seed, "test")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    /// Must agree with the subcommand when given.
    pub mode: Option<Mode>,
    pub seed: u64,
    pub output_dir: PathBuf,

    pub teacher_spec: Option<ModelSpec>,
    pub teacher_checkpoint: Option<PathBuf>,
    pub student_spec: Option<ModelSpec>,
    pub student_checkpoint: Option<PathBuf>,
    /// Model evaluated by `eval`.
    pub checkpoint: Option<PathBuf>,

    pub dataset: DataSource,
    pub synthetic: SyntheticSettings,
    pub train_data: Option<PathBuf>,
    pub test_data: Option<PathBuf>,

    pub schedule: ScheduleKind,
    pub epochs: Option<usize>,
    pub lr: Option<f64>,
    pub decay_factor: Option<f64>,
    pub decay_epochs: Option<Vec<usize>>,
    pub weight_decay: Option<f64>,
    pub momentum: Option<f64>,
    pub nesterov: Option<bool>,
    pub batch_size: usize,
    pub flip: bool,

    /// Defaults to 1, or 0 for `transfer_distill`.
    pub gamma: Option<f64>,
    pub theta: f64,
    pub rho: f64,
    pub alpha1: f64,
    pub alpha2: f64,
    pub tau: f64,
    pub negatives: usize,
    pub bank_momentum: f64,
    pub embed_dim: usize,
    pub head: HeadKind,
    pub distill_method: String,
    pub negative_source: NegativeSource,
    pub critic_norm: CriticNorm,
    pub train_teacher_heads: bool,
    pub mapping: MappingKind,
    pub mapping_seed: u64,
    pub probe_size: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            mode: None,
            seed: 0,
            output_dir: PathBuf::from("out"),
            teacher_spec: None,
            teacher_checkpoint: None,
            student_spec: None,
            student_checkpoint: None,
            checkpoint: None,
            dataset: DataSource::Synthetic,
            synthetic: SyntheticSettings::default(),
            train_data: None,
            test_data: None,
            schedule: ScheduleKind::Desk,
            epochs: None,
            lr: None,
            decay_factor: None,
            decay_epochs: None,
            weight_decay: None,
            momentum: None,
            nesterov: None,
            batch_size: 32,
            flip: false,
            gamma: None,
            theta: 0.0,
            rho: DEFAULT_RHO,
            alpha1: 0.8,
            alpha2: 0.2,
            tau: DEFAULT_TAU,
            negatives: DESK_NEGATIVES,
            bank_momentum: DEFAULT_BANK_MOMENTUM,
            embed_dim: DEFAULT_EMBED_DIM,
            head: HeadKind::Linear,
            distill_method: "kd".into(),
            negative_source: NegativeSource::Bank,
            critic_norm: CriticNorm::None,
            train_teacher_heads: true,
            mapping: MappingKind::TeacherLast,
            mapping_seed: 0,
            probe_size: 64,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("`{key}`: cannot parse `{value}`")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!("`{key}`: expected true or false, got `{value}`"))),
    }
}

fn parse_spec(key: &str, value: &str) -> Result<ModelSpec> {
    value.parse().map_err(|e| Error::Config(format!("`{key}`: {e}")))
}

fn parse_shape(key: &str, value: &str) -> Result<[usize; 3]> {
    let dims = value.split('x').map(|d| parse::<usize>(key, d)).collect::<Result<Vec<_>>>()?;
    dims.try_into()
        .map_err(|_| Error::Config(format!("`{key}`: expected CxHxW, got `{value}`")))
}

fn parse_list(key: &str, value: &str) -> Result<Vec<usize>> {
    if value.is_empty() {
        return Ok(Vec::new());
    }
    value.split(',').map(|v| parse(key, v.trim())).collect()
}

fn config_err(e: Error) -> Error {
    match e {
        Error::Config(_) => e,
        other => Error::Config(other.to_string()),
    }
}

/// Splits config text into `(key, value)` pairs in file order.
pub fn parse_entries(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected key = value, got `{line}`", n + 1)))?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

/// Splits a `--set` argument.
pub fn parse_override(arg: &str) -> Result<(String, String)> {
    let (k, v) = arg
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{arg}` is not key=value")))?;
    Ok((k.trim().to_string(), v.trim().to_string()))
}

impl ExperimentConfig {
    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (k, v) in parse_entries(text)? {
            cfg.set(&k, &v)?;
        }
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_text(&text)
    }

    /// Sets one key from its text value.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value;
        let path = || Some(PathBuf::from(v));
        match key {
            "mode" => self.mode = Some(v.parse()?),
            "seed" => self.seed = parse(key, v)?,
            "output_dir" => self.output_dir = PathBuf::from(v),
            "teacher_spec" => self.teacher_spec = Some(parse_spec(key, v)?),
            "teacher_checkpoint" => self.teacher_checkpoint = path(),
            "student_spec" => self.student_spec = Some(parse_spec(key, v)?),
            "student_checkpoint" => self.student_checkpoint = path(),
            "checkpoint" => self.checkpoint = path(),
            "dataset" => {
                self.dataset = match v {
                    "synthetic" => DataSource::Synthetic,
                    "raw" => DataSource::Raw,
                    _ => return Err(Error::Config(format!("`dataset`: expected synthetic or raw, got `{v}`"))),
                }
            }
            "synthetic_classes" => self.synthetic.classes = parse(key, v)?,
            "synthetic_train_per_class" => self.synthetic.train_per_class = parse(key, v)?,
            "synthetic_test_per_class" => self.synthetic.test_per_class = parse(key, v)?,
            "synthetic_shape" => self.synthetic.shape = parse_shape(key, v)?,
            "synthetic_prototype_seed" => self.synthetic.prototype_seed = parse(key, v)?,
            "synthetic_train_seed" => self.synthetic.train_seed = parse(key, v)?,
            "synthetic_test_seed" => self.synthetic.test_seed = parse(key, v)?,
            "synthetic_noise" => self.synthetic.noise = parse(key, v)?,
            "synthetic_jitter" => self.synthetic.jitter = parse(key, v)?,
            "synthetic_blobs" => self.synthetic.blobs = parse(key, v)?,
            "synthetic_amplitude_spread" => self.synthetic.amplitude_spread = parse(key, v)?,
            "train_data" => self.train_data = path(),
            "test_data" => self.test_data = path(),
            "schedule" => {
                self.schedule = match v {
                    "desk" => ScheduleKind::Desk,
                    "full" => ScheduleKind::Full,
                    _ => return Err(Error::Config(format!("`schedule`: expected desk or full, got `{v}`"))),
                }
            }
            "epochs" => self.epochs = Some(parse(key, v)?),
            "lr" => self.lr = Some(parse(key, v)?),
            "decay_factor" => self.decay_factor = Some(parse(key, v)?),
            "decay_epochs" => self.decay_epochs = Some(parse_list(key, v)?),
            "weight_decay" => self.weight_decay = Some(parse(key, v)?),
            "momentum" => self.momentum = Some(parse(key, v)?),
            "nesterov" => self.nesterov = Some(parse_bool(key, v)?),
            "batch_size" => self.batch_size = parse(key, v)?,
            "flip" => self.flip = parse_bool(key, v)?,
            "gamma" => self.gamma = Some(parse(key, v)?),
            "theta" => self.theta = parse(key, v)?,
            "rho" => self.rho = parse(key, v)?,
            "alpha1" => self.alpha1 = parse(key, v)?,
            "alpha2" => self.alpha2 = parse(key, v)?,
            "tau" => self.tau = parse(key, v)?,
            "negatives" => self.negatives = parse(key, v)?,
            "bank_momentum" => self.bank_momentum = parse(key, v)?,
            "embed_dim" => self.embed_dim = parse(key, v)?,
            "head" => self.head = v.parse()?,
            "distill_method" => self.distill_method = v.to_string(),
            "negative_source" => self.negative_source = v.parse()?,
            "critic_norm" => self.critic_norm = v.parse()?,
            "teacher_heads" => {
                self.train_teacher_heads = match v {
                    "trainable" => true,
                    "frozen" => false,
                    _ => return Err(Error::Config(format!("`teacher_heads`: expected trainable or frozen, got `{v}`"))),
                }
            }
            "mapping" => self.mapping = v.parse()?,
            "mapping_seed" => self.mapping_seed = parse(key, v)?,
            "probe_size" => self.probe_size = parse(key, v)?,
            _ => return Err(Error::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    pub fn apply_overrides<S: AsRef<str>>(&mut self, overrides: &[S]) -> Result<()> {
        for o in overrides {
            let (k, v) = parse_override(o.as_ref())?;
            self.set(&k, &v)?;
        }
        Ok(())
    }

    /// Every key with its effective value, in a fixed order. Unset optional
    /// keys are left out. Feeding the text back through
    /// [`ExperimentConfig::from_text`] reproduces the config.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let mut e: Vec<(&'static str, String)> = Vec::new();
        let opt = |e: &mut Vec<(&'static str, String)>, k: &'static str, v: Option<String>| {
            if let Some(v) = v {
                e.push((k, v));
            }
        };
        let p = |x: &Option<PathBuf>| x.as_ref().map(|p| p.display().to_string());
        opt(&mut e, "mode", self.mode.map(|m| m.to_string()));
        e.push(("seed", self.seed.to_string()));
        e.push(("output_dir", self.output_dir.display().to_string()));
        opt(&mut e, "teacher_spec", self.teacher_spec.as_ref().map(ToString::to_string));
        opt(&mut e, "teacher_checkpoint", p(&self.teacher_checkpoint));
        opt(&mut e, "student_spec", self.student_spec.as_ref().map(ToString::to_string));
        opt(&mut e, "student_checkpoint", p(&self.student_checkpoint));
        opt(&mut e, "checkpoint", p(&self.checkpoint));
        e.push(("dataset", match self.dataset { DataSource::Synthetic => "synthetic", DataSource::Raw => "raw" }.into()));
        let s = &self.synthetic;
        e.push(("synthetic_classes", s.classes.to_string()));
        e.push(("synthetic_train_per_class", s.train_per_class.to_string()));
        e.push(("synthetic_test_per_class", s.test_per_class.to_string()));
        e.push(("synthetic_shape", format!("{}x{}x{}", s.shape[0], s.shape[1], s.shape[2])));
        e.push(("synthetic_prototype_seed", s.prototype_seed.to_string()));
        e.push(("synthetic_train_seed", s.train_seed.to_string()));
        e.push(("synthetic_test_seed", s.test_seed.to_string()));
        e.push(("synthetic_noise", s.noise.to_string()));
        e.push(("synthetic_jitter", s.jitter.to_string()));
        e.push(("synthetic_blobs", s.blobs.to_string()));
        e.push(("synthetic_amplitude_spread", s.amplitude_spread.to_string()));
        opt(&mut e, "train_data", p(&self.train_data));
        opt(&mut e, "test_data", p(&self.test_data));
        e.push(("schedule", match self.schedule { ScheduleKind::Desk => "desk", ScheduleKind::Full => "full" }.into()));
        opt(&mut e, "epochs", self.epochs.map(|x| x.to_string()));
        opt(&mut e, "lr", self.lr.map(|x| x.to_string()));
        opt(&mut e, "decay_factor", self.decay_factor.map(|x| x.to_string()));
        opt(
            &mut e,
            "decay_epochs",
            self.decay_epochs.as_ref().map(|d| d.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")),
        );
        opt(&mut e, "weight_decay", self.weight_decay.map(|x| x.to_string()));
        opt(&mut e, "momentum", self.momentum.map(|x| x.to_string()));
        opt(&mut e, "nesterov", self.nesterov.map(|x| x.to_string()));
        e.push(("batch_size", self.batch_size.to_string()));
        e.push(("flip", self.flip.to_string()));
        opt(&mut e, "gamma", self.gamma.map(|x| x.to_string()));
        e.push(("theta", self.theta.to_string()));
        e.push(("rho", self.rho.to_string()));
        e.push(("alpha1", self.alpha1.to_string()));
        e.push(("alpha2", self.alpha2.to_string()));
        e.push(("tau", self.tau.to_string()));
        e.push(("negatives", self.negatives.to_string()));
        e.push(("bank_momentum", self.bank_momentum.to_string()));
        e.push(("embed_dim", self.embed_dim.to_string()));
        e.push(("head", self.head.to_string()));
        e.push(("distill_method", self.distill_method.clone()));
        e.push(("negative_source", self.negative_source.to_string()));
        e.push(("critic_norm", self.critic_norm.to_string()));
        e.push(("teacher_heads", if self.train_teacher_heads { "trainable" } else { "frozen" }.into()));
        e.push(("mapping", self.mapping.to_string()));
        e.push(("mapping_seed", self.mapping_seed.to_string()));
        e.push(("probe_size", self.probe_size.to_string()));
        e
    }

    pub fn to_text(&self) -> String {
        self.entries().into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    /// Checks that everything `mode` needs is present, that input files
    /// exist and that the numeric settings are valid.
    pub fn validate(&self, mode: Mode) -> Result<()> {
        if let Some(m) = self.mode {
            if m != mode {
                return Err(Error::Config(format!("config is for mode `{m}` but `{mode}` was requested")));
            }
        }
        let need = |what: &str, present: bool| {
            if present {
                Ok(())
            } else {
                Err(Error::Config(format!("mode `{mode}` needs `{what}`")))
            }
        };
        let exists = |key: &str, p: &Option<PathBuf>| match p {
            Some(p) if !p.is_file() => Err(Error::Config(format!("`{key}`: no such file {}", p.display()))),
            _ => Ok(()),
        };
        match mode {
            Mode::TrainTeacher => need("teacher_spec", self.teacher_spec.is_some())?,
            Mode::Distill | Mode::TransferDistill => {
                need("teacher_checkpoint", self.teacher_checkpoint.is_some())?;
                need("student_spec or student_checkpoint", self.student_spec.is_some() || self.student_checkpoint.is_some())?;
            }
            Mode::FinetuneLinear => {
                need("student_spec or student_checkpoint", self.student_spec.is_some() || self.student_checkpoint.is_some())?
            }
            Mode::Eval => need("checkpoint", self.checkpoint.is_some())?,
        }
        exists("teacher_checkpoint", &self.teacher_checkpoint)?;
        exists("student_checkpoint", &self.student_checkpoint)?;
        exists("checkpoint", &self.checkpoint)?;
        if self.dataset == DataSource::Raw {
            need("train_data", self.train_data.is_some() || mode == Mode::Eval)?;
            need("test_data", self.test_data.is_some() || mode == Mode::TransferDistill)?;
            exists("train_data", &self.train_data)?;
            exists("test_data", &self.test_data)?;
        }
        if self.batch_size == 0 {
            return Err(Error::Config("`batch_size` must be positive".into()));
        }
        self.schedule().validate().map_err(config_err)?;
        // loss settings are checked in every mode so a typo never waits for
        // the distillation step to surface
        self.loss_config(mode, self.negatives + 1).validate().map_err(config_err)?;
        if matches!(mode, Mode::Distill | Mode::TransferDistill) {
            if !(0.0..1.0).contains(&self.bank_momentum) {
                return Err(Error::Config(format!("`bank_momentum` must lie in [0, 1), got {}", self.bank_momentum)));
            }
            if self.embed_dim == 0 {
                return Err(Error::Config("`embed_dim` must be positive".into()));
            }
        }
        Ok(())
    }

    /// The base schedule (desk or full) with any explicit overrides. A
    /// changed `epochs` keeps the decay points at the same fractions unless
    /// `decay_epochs` is also given.
    pub fn schedule(&self) -> TrainingSchedule {
        let base = match self.schedule {
            ScheduleKind::Desk => TrainingSchedule::desk(),
            ScheduleKind::Full => TrainingSchedule::default(),
        };
        let mut s = match self.epochs {
            Some(n) if n != base.total_epochs => base.with_epochs(n),
            _ => base,
        };
        if let Some(v) = self.lr {
            s.base_lr = v;
        }
        if let Some(v) = self.decay_factor {
            s.decay_factor = v;
        }
        if let Some(v) = &self.decay_epochs {
            s.decay_epochs = v.clone();
        }
        if let Some(v) = self.weight_decay {
            s.weight_decay = v;
        }
        if let Some(v) = self.momentum {
            s.momentum = v;
        }
        if let Some(v) = self.nesterov {
            s.nesterov = v;
        }
        s
    }

    pub fn run_options(&self) -> RunOptions {
        RunOptions { schedule: self.schedule(), batch_size: self.batch_size, seed: self.seed, flip: self.flip }
    }

    pub fn loss_config(&self, mode: Mode, dataset_size: usize) -> LossConfig {
        let gamma = self.gamma.unwrap_or(if mode == Mode::TransferDistill { 0.0 } else { 1.0 });
        let mut loss = LossConfig::compression(CriticParams { tau: self.tau, num_negatives: self.negatives, dataset_size });
        loss.gamma = gamma;
        loss.theta = self.theta;
        loss.rho = self.rho;
        loss.ckt.alpha1 = self.alpha1;
        loss.ckt.alpha2 = self.alpha2;
        loss.distill_method = self.distill_method.clone();
        loss
    }

    pub fn distill_options(&self, mode: Mode, dataset_size: usize) -> DistillOptions {
        let mut o = DistillOptions::new(self.run_options(), self.loss_config(mode, dataset_size));
        o.mapping = MappingStrategy { kind: self.mapping, seed: self.mapping_seed };
        o.head = self.head;
        o.embed_dim = self.embed_dim;
        o.bank_momentum = self.bank_momentum;
        o.negatives = self.negative_source;
        o.probe_size = self.probe_size;
        o.critic_norm = self.critic_norm;
        o.train_teacher_heads = self.train_teacher_heads;
        o
    }

    /// Training split, if the source has one.
    pub fn train_data(&self) -> Result<Option<Dataset>> {
        match self.dataset {
            DataSource::Synthetic => self.synthetic.train().map(Some),
            DataSource::Raw => self.train_data.as_ref().map(load_with_sidecar).transpose(),
        }
    }

    /// Test split, if the source has one.
    pub fn test_data(&self) -> Result<Option<Dataset>> {
        match self.dataset {
            DataSource::Synthetic => self.synthetic.test().map(Some),
            DataSource::Raw => self.test_data.as_ref().map(load_with_sidecar).transpose(),
        }
    }
}
