//! Executes one configured experiment and writes its outputs.
//!
//! Every mode writes into `output_dir`:
//!
//! | file | modes | content |
//! |---|---|---|
//! | `config.txt` | all | effective configuration, one `key = value` per line |
//! | `metrics.tsv`, `timing.tsv` | all but `eval` | per-epoch records |
//! | `summary.json` | all | final accuracies and the configuration |
//! | `teacher.ckpt` | `train_teacher` | trained model |
//! | `student.ckpt` | `distill`, `transfer_distill`, `finetune_linear` | student model parameters only |
//! | `state.ckpt` | `distill`, `transfer_distill` | student plus projection heads, memory banks and critic constants |
//!
//! Nothing written depends on wall-clock time except `timing.tsv`.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::contrastive::{ContrastiveState, CriticNorm};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::harness::config::{ExperimentConfig, Mode};
use crate::harness::metrics::{write_metrics, MetricsRecord};
use crate::harness::train::{distill, evaluate, finetune_linear, train_supervised, transfer_distill, DistillOutcome};
use crate::model::{ArrayKind, Checkpoint, Model, NamedArray};

pub const CONFIG_ECHO_FILE: &str = "config.txt";
pub const SUMMARY_FILE: &str = "summary.json";
pub const TEACHER_CHECKPOINT: &str = "teacher.ckpt";
pub const STUDENT_CHECKPOINT: &str = "student.ckpt";
pub const STATE_CHECKPOINT: &str = "state.ckpt";

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Summary {
    pub mode: String,
    pub seed: u64,
    pub epochs: usize,
    pub final_train_acc: Option<f64>,
    pub final_test_acc: Option<f64>,
    /// Frozen teacher on the test split (distillation modes).
    pub teacher_test_acc: Option<f64>,
    /// Teacher:student layer pairs, e.g. `1:0,3:1`.
    pub mapping: Option<String>,
    pub files: Vec<String>,
    pub config: BTreeMap<String, String>,
}

fn load_model(path: &Path) -> Result<Model> {
    Model::from_checkpoint(&Checkpoint::load(path)?)
}

fn required(data: Option<Dataset>, what: &str) -> Result<Dataset> {
    data.ok_or_else(|| Error::Config(format!("no {what} split configured")))
}

/// The student a run starts from: a checkpoint if given, else a fresh
/// model seeded with the run seed.
fn initial_student(cfg: &ExperimentConfig) -> Result<Model> {
    match (&cfg.student_checkpoint, &cfg.student_spec) {
        (Some(p), _) => load_model(p),
        (None, Some(spec)) => Model::build(spec, cfg.seed),
        (None, None) => Err(Error::Config("no student_spec or student_checkpoint".into())),
    }
}

/// Full training state of a distillation run.
pub fn state_checkpoint(out: &DistillOutcome) -> Checkpoint {
    let mut ck = out.student.to_checkpoint();
    ck.arrays.extend(out.heads.to_arrays());
    ck.arrays.extend(out.state.bank.to_arrays());
    if out.state.norm == CriticNorm::FirstBatch {
        let sites = out.state.bank.num_sites();
        ck.arrays.push(NamedArray {
            name: "critic.log_z".into(),
            kind: ArrayKind::Bank,
            shape: vec![sites],
            data: (0..sites).map(|s| out.state.log_z(s).unwrap_or(f64::NAN)).collect(),
        });
    }
    ck
}

/// Writes `state.ckpt`-style critic constants back into a state.
pub fn restore_log_z(ck: &Checkpoint, state: &mut ContrastiveState) -> Result<()> {
    if let Some(a) = ck.arrays.iter().find(|a| a.name == "critic.log_z") {
        for (site, &z) in a.data.iter().enumerate() {
            if !z.is_nan() {
                state.set_log_z(site, z)?;
            }
        }
    }
    Ok(())
}

struct Outputs {
    dir: PathBuf,
    files: Vec<String>,
}

impl Outputs {
    fn new(dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        Ok(Self { dir: dir.to_path_buf(), files: Vec::new() })
    }

    fn text(&mut self, name: &str, text: &str) -> Result<()> {
        let path = self.dir.join(name);
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        self.files.push(name.into());
        Ok(())
    }

    fn checkpoint(&mut self, name: &str, ck: &Checkpoint) -> Result<()> {
        ck.save(self.dir.join(name))?;
        self.files.push(name.into());
        Ok(())
    }

    fn metrics(&mut self, records: &[MetricsRecord], modules: usize) -> Result<()> {
        write_metrics(&self.dir, records, modules)?;
        self.files.extend([crate::harness::METRICS_FILE.to_string(), crate::harness::TIMING_FILE.to_string()]);
        Ok(())
    }
}

/// Runs `mode` as configured. `progress` sees every epoch record as it is
/// produced.
pub fn run_experiment(
    cfg: &ExperimentConfig,
    mode: Mode,
    progress: &mut dyn FnMut(&MetricsRecord),
) -> Result<Summary> {
    cfg.validate(mode)?;
    let mut out = Outputs::new(&cfg.output_dir)?;
    out.text(CONFIG_ECHO_FILE, &cfg.to_text())?;
    let test = cfg.test_data()?;
    let mut summary = Summary {
        mode: mode.to_string(),
        seed: cfg.seed,
        epochs: 0,
        final_train_acc: None,
        final_test_acc: None,
        teacher_test_acc: None,
        mapping: None,
        files: Vec::new(),
        config: cfg.entries().into_iter().map(|(k, v)| (k.to_string(), v)).collect(),
    };
    let records = match mode {
        Mode::TrainTeacher => {
            let spec = cfg.teacher_spec.as_ref().ok_or_else(|| Error::Config("no teacher_spec".into()))?;
            let train = required(cfg.train_data()?, "training")?;
            let mut model = Model::build(spec, cfg.seed)?;
            let records = train_supervised(&mut model, &train, test.as_ref(), &cfg.run_options(), progress)?;
            out.metrics(&records, 0)?;
            out.checkpoint(TEACHER_CHECKPOINT, &model.to_checkpoint())?;
            records
        }
        Mode::Distill | Mode::TransferDistill => {
            let teacher_path = cfg.teacher_checkpoint.as_ref().ok_or_else(|| Error::Config("no teacher_checkpoint".into()))?;
            let teacher = load_model(teacher_path)?;
            let student = initial_student(cfg)?;
            let train = required(cfg.train_data()?, "training")?;
            let opts = cfg.distill_options(mode, train.len());
            let outcome = if mode == Mode::Distill {
                distill(&teacher, student, &train, test.as_ref(), &opts, progress)?
            } else {
                transfer_distill(&teacher, student, &train.unlabeled(), &opts, progress)?
            };
            if mode == Mode::Distill {
                summary.teacher_test_acc = test.as_ref().map(|t| evaluate(&teacher, t)).transpose()?;
            }
            summary.mapping = Some(outcome.mapping.to_string());
            out.metrics(&outcome.records, outcome.student.num_modules())?;
            out.checkpoint(STUDENT_CHECKPOINT, &outcome.student.to_checkpoint())?;
            out.checkpoint(STATE_CHECKPOINT, &state_checkpoint(&outcome))?;
            outcome.records
        }
        Mode::FinetuneLinear => {
            let mut model = initial_student(cfg)?;
            let train = required(cfg.train_data()?, "training")?;
            let records = finetune_linear(&mut model, &train, test.as_ref(), &cfg.run_options(), progress)?;
            out.metrics(&records, 0)?;
            out.checkpoint(STUDENT_CHECKPOINT, &model.to_checkpoint())?;
            records
        }
        Mode::Eval => {
            let path = cfg.checkpoint.as_ref().ok_or_else(|| Error::Config("no checkpoint".into()))?;
            let model = load_model(path)?;
            summary.final_test_acc = test.as_ref().map(|t| evaluate(&model, t)).transpose()?;
            summary.final_train_acc = cfg.train_data()?.map(|t| evaluate(&model, &t)).transpose()?;
            Vec::new()
        }
    };
    if let Some(last) = records.last() {
        summary.epochs = records.len();
        summary.final_train_acc = last.train_acc;
        summary.final_test_acc = last.test_acc;
    }
    out.files.push(SUMMARY_FILE.into());
    summary.files = out.files.clone();
    let json = serde_json::to_string_pretty(&summary).map_err(|e| Error::Usage(format!("summary: {e}")))?;
    let path = out.dir.join(SUMMARY_FILE);
    std::fs::write(&path, json + "\n").map_err(|e| Error::io(&path, e))?;
    Ok(summary)
}
