//! Training, distillation, fine-tuning and evaluation loops.

use std::time::Instant;

use crate::contrastive::{ContrastiveState, CriticNorm, NegativeSource, DEFAULT_BANK_MOMENTUM};
use crate::data::{Batch, BatchStream, Dataset};
use crate::error::{Error, Result};
use crate::harness::metrics::MetricsRecord;
use crate::harness::schedule::{sgd_step, SgdState, TrainingSchedule};
use crate::losses::{cross_entropy, total_loss, LossBreakdown, LossConfig, StepInputs};
use crate::mapping::{map_layers, LayerMapping, MappingStrategy};
use crate::model::{Model, Parameter};
use crate::projection::{HeadKind, HeadSet};
use crate::tensor::Tensor;

/// Distinct seeds for the independent random streams of one run.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    seed ^ stream.wrapping_mul(0x9e37_79b9_7f4a_7c15).rotate_left(17)
}

pub const STREAM_BATCHES: u64 = 1;
pub const STREAM_HEADS: u64 = 2;
pub const STREAM_BANK: u64 = 3;
pub const STREAM_CLASSIFIER: u64 = 4;

pub const EVAL_BATCH: usize = 256;

#[derive(Debug, Clone, PartialEq)]
pub struct RunOptions {
    pub schedule: TrainingSchedule,
    pub batch_size: usize,
    pub seed: u64,
    pub flip: bool,
}

impl RunOptions {
    pub fn desk(seed: u64) -> Self {
        Self { schedule: TrainingSchedule::desk(), batch_size: 32, seed, flip: false }
    }
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Number of rows of `[B, c]` logits whose first maximum is at the label.
pub fn correct_count(logits: &[f64], num_classes: usize, labels: &[usize]) -> usize {
    logits.chunks_exact(num_classes).zip(labels).filter(|(row, &y)| argmax(row) == y).count()
}

/// Top-1 accuracy from logits.
pub fn accuracy(logits: &[f64], num_classes: usize, labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    correct_count(logits, num_classes, labels) as f64 / labels.len() as f64
}

/// Top-1 accuracy of `model` on a labeled dataset.
pub fn evaluate(model: &Model, data: &Dataset) -> Result<f64> {
    let labels = data.labels.as_ref().ok_or_else(|| Error::Usage("evaluation needs labels".into()))?;
    let frozen = model.clone().freeze();
    let mut correct = 0;
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(EVAL_BATCH) {
        let logits = frozen.logits(&data.batch(chunk)?.images)?;
        let y: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
        correct += correct_count(logits.data(), data.num_classes, &y);
    }
    Ok(if data.is_empty() { 0.0 } else { correct as f64 / data.len() as f64 })
}

/// Runs [`sgd_step`] on the parameters that received a gradient.
fn step_with_grads(params: Vec<&mut Parameter>, schedule: &TrainingSchedule, epoch: usize, sgd: &mut SgdState) -> Result<()> {
    let mut live: Vec<&mut Parameter> = params.into_iter().filter(|p| p.tensor.grad().is_some()).collect();
    sgd_step(&mut live, schedule, epoch, sgd)
}

#[derive(Default)]
struct EpochTotals {
    batches: usize,
    total: f64,
    ce: f64,
    ckt: f64,
    distill: f64,
    modules: Vec<f64>,
    penultimate: f64,
    correct: usize,
    seen: usize,
    labeled: bool,
}

impl EpochTotals {
    fn add(&mut self, b: &LossBreakdown, logits: &Tensor, labels: Option<&[usize]>, classes: usize) {
        self.batches += 1;
        self.total += b.total_value();
        self.ce += b.ce;
        self.ckt += b.ckt;
        self.distill += b.distill;
        self.modules.resize(b.per_module.len(), 0.0);
        for (acc, v) in self.modules.iter_mut().zip(&b.per_module) {
            *acc += v;
        }
        self.penultimate += b.penultimate;
        if let Some(y) = labels {
            self.labeled = true;
            self.correct += correct_count(logits.data(), classes, y);
            self.seen += y.len();
        }
    }

    fn record(&self, epoch: usize, lr: f64, test_acc: Option<f64>, seconds: f64) -> MetricsRecord {
        let n = self.batches.max(1) as f64;
        MetricsRecord {
            epoch,
            lr,
            loss_total: self.total / n,
            loss_ce: self.ce / n,
            loss_ckt: self.ckt / n,
            loss_distill: self.distill / n,
            loss_modules: self.modules.iter().map(|v| v / n).collect(),
            loss_penultimate: self.penultimate / n,
            train_acc: self.labeled.then(|| self.correct as f64 / self.seen.max(1) as f64),
            test_acc,
            seconds,
        }
    }
}

fn test_accuracy(model: &Model, test: Option<&Dataset>) -> Result<Option<f64>> {
    test.map(|t| evaluate(model, t)).transpose()
}

/// Cross-entropy training of every trainable parameter of `model`.
pub fn train_supervised(
    model: &mut Model,
    train: &Dataset,
    test: Option<&Dataset>,
    opts: &RunOptions,
    progress: &mut dyn FnMut(&MetricsRecord),
) -> Result<Vec<MetricsRecord>> {
    opts.schedule.validate()?;
    if train.labels.is_none() {
        return Err(Error::Usage("supervised training needs labels".into()));
    }
    let mut stream = BatchStream::new(train.len(), opts.batch_size, derive_seed(opts.seed, STREAM_BATCHES))?.with_flip(opts.flip);
    let mut sgd = SgdState::default();
    let mut records = Vec::new();
    for epoch in 0..opts.schedule.total_epochs {
        let start = Instant::now();
        let lr = opts.schedule.lr_at_epoch(epoch)?;
        stream.start_epoch(epoch as u64);
        let mut totals = EpochTotals::default();
        while let Some(batch) = stream.next_batch(train)? {
            let labels = batch.labels.as_deref().unwrap_or_default();
            let out = model.forward_all(&batch.images)?;
            let ce = cross_entropy(labels, &out.logits)?;
            model.zero_grad();
            ce.backward()?;
            step_with_grads(model.trainable_parameters_mut(), &opts.schedule, epoch, &mut sgd)?;
            let ce_value = ce.item()?;
            let breakdown = LossBreakdown {
                total: ce,
                ce: ce_value,
                ckt: 0.0,
                distill: 0.0,
                per_module: Vec::new(),
                penultimate: 0.0,
                sites: Vec::new(),
            };
            totals.add(&breakdown, &out.logits, Some(labels), train.num_classes);
        }
        let test_acc = test_accuracy(model, test)?;
        let rec = totals.record(epoch, lr, test_acc, start.elapsed().as_secs_f64());
        progress(&rec);
        records.push(rec);
    }
    Ok(records)
}

/// Freezes the backbone, re-draws the classifier and trains it alone.
pub fn finetune_linear(
    model: &mut Model,
    train: &Dataset,
    test: Option<&Dataset>,
    opts: &RunOptions,
    progress: &mut dyn FnMut(&MetricsRecord),
) -> Result<Vec<MetricsRecord>> {
    if model.spec().num_classes != train.num_classes {
        return Err(Error::Spec(format!(
            "model has {} classes, fine-tuning data has {}",
            model.spec().num_classes,
            train.num_classes
        )));
    }
    model.freeze_backbone();
    model.reset_classifier(derive_seed(opts.seed, STREAM_CLASSIFIER))?;
    train_supervised(model, train, test, opts, progress)
}

#[derive(Debug, Clone, PartialEq)]
pub struct DistillOptions {
    pub run: RunOptions,
    /// `critic.dataset_size` is overwritten with the training-set size.
    pub loss: LossConfig,
    pub mapping: MappingStrategy,
    pub head: HeadKind,
    pub embed_dim: usize,
    pub bank_momentum: f64,
    pub negatives: NegativeSource,
    /// Samples from the start of the training set used by cosine mappings.
    pub probe_size: usize,
    pub critic_norm: CriticNorm,
    /// When false the teacher-side heads keep their initial weights.
    pub train_teacher_heads: bool,
}

impl DistillOptions {
    pub fn new(run: RunOptions, loss: LossConfig) -> Self {
        Self {
            run,
            loss,
            mapping: MappingStrategy::default(),
            head: HeadKind::Linear,
            embed_dim: crate::projection::DEFAULT_EMBED_DIM,
            bank_momentum: DEFAULT_BANK_MOMENTUM,
            negatives: NegativeSource::Bank,
            probe_size: 64,
            critic_norm: CriticNorm::None,
            train_teacher_heads: true,
        }
    }
}

/// State of one distillation run, advanced a batch at a time.
pub struct Distiller {
    teacher: Model,
    pub student: Model,
    pub heads: HeadSet,
    pub state: ContrastiveState,
    pub mapping: LayerMapping,
    loss: LossConfig,
    schedule: TrainingSchedule,
    sgd: SgdState,
    train_teacher_heads: bool,
}

impl Distiller {
    pub fn new(teacher: &Model, student: Model, train: &Dataset, opts: &DistillOptions) -> Result<Self> {
        opts.run.schedule.validate()?;
        let teacher = teacher.clone().freeze();
        let mut loss = opts.loss.clone();
        loss.critic.dataset_size = train.len();
        loss.validate()?;
        if loss.gamma != 0.0 && train.labels.is_none() {
            return Err(Error::Usage("gamma = 1 needs a labeled training set".into()));
        }
        let probe = if opts.mapping.kind.needs_probe() {
            let idx: Vec<usize> = (0..opts.probe_size.min(train.len())).collect();
            Some(train.batch(&idx)?.images)
        } else {
            None
        };
        let mapping = map_layers(&opts.mapping, &teacher, &student, probe.as_ref())?;
        let heads = HeadSet::for_models(&teacher, &student, opts.embed_dim, opts.head, derive_seed(opts.run.seed, STREAM_HEADS))?;
        let state = ContrastiveState::new(
            student.num_modules(),
            loss.critic,
            opts.embed_dim,
            opts.bank_momentum,
            derive_seed(opts.run.seed, STREAM_BANK),
        )?
        .with_source(opts.negatives)
        .with_norm(opts.critic_norm);
        Ok(Self {
            teacher,
            student,
            heads,
            state,
            mapping,
            loss,
            schedule: opts.run.schedule.clone(),
            sgd: SgdState::default(),
            train_teacher_heads: opts.train_teacher_heads,
        })
    }

    pub fn teacher(&self) -> &Model {
        &self.teacher
    }

    pub fn loss_config(&self) -> &LossConfig {
        &self.loss
    }

    /// Forward and backward pass on one batch; gradients are left on the
    /// student and head parameters. Returns the breakdown and student logits.
    pub fn compute(&mut self, batch: &Batch) -> Result<(LossBreakdown, Tensor)> {
        let t_out = self.teacher.forward_with_taps(&batch.images, &self.mapping.teacher_taps())?;
        let s_out = self.student.forward_with_taps(&batch.images, &self.mapping.student_taps())?;
        let labels = if self.loss.gamma != 0.0 { batch.labels.as_deref() } else { None };
        let inputs = StepInputs { labels, sample_indices: &batch.indices, student: &s_out, teacher: &t_out };
        let breakdown = total_loss(&inputs, &self.heads, &mut self.state, &self.loss)?;
        self.student.zero_grad();
        self.heads.zero_grad();
        breakdown.total.backward()?;
        Ok((breakdown, s_out.logits))
    }

    /// Optimizer step on everything that received a gradient, then the
    /// memory-bank update with this step's embeddings.
    pub fn apply(&mut self, breakdown: &LossBreakdown, epoch: usize) -> Result<()> {
        let mut params = self.student.trainable_parameters_mut();
        if self.train_teacher_heads {
            params.extend(self.heads.parameters_mut());
        } else {
            params.extend(self.heads.student_parameters_mut());
        }
        step_with_grads(params, &self.schedule, epoch, &mut self.sgd)?;
        self.state.update_bank(&breakdown.sites)
    }

    pub fn step(&mut self, batch: &Batch, epoch: usize) -> Result<(LossBreakdown, Tensor)> {
        let (b, logits) = self.compute(batch)?;
        self.apply(&b, epoch)?;
        Ok((b, logits))
    }
}

pub struct DistillOutcome {
    pub student: Model,
    pub heads: HeadSet,
    pub state: ContrastiveState,
    pub mapping: LayerMapping,
    pub records: Vec<MetricsRecord>,
}

/// Full distillation run. With `opts.loss.gamma == 0` the labels of `train`
/// are never read.
pub fn distill(
    teacher: &Model,
    student: Model,
    train: &Dataset,
    test: Option<&Dataset>,
    opts: &DistillOptions,
    progress: &mut dyn FnMut(&MetricsRecord),
) -> Result<DistillOutcome> {
    let train_view = if opts.loss.gamma == 0.0 { train.unlabeled() } else { train.clone() };
    let mut d = Distiller::new(teacher, student, &train_view, opts)?;
    let mut stream = BatchStream::new(train.len(), opts.run.batch_size, derive_seed(opts.run.seed, STREAM_BATCHES))?
        .with_flip(opts.run.flip);
    let mut records = Vec::new();
    for epoch in 0..opts.run.schedule.total_epochs {
        let start = Instant::now();
        let lr = opts.run.schedule.lr_at_epoch(epoch)?;
        stream.start_epoch(epoch as u64);
        let mut totals = EpochTotals::default();
        while let Some(batch) = stream.next_batch(&train_view)? {
            let (b, logits) = d.step(&batch, epoch)?;
            totals.add(&b, &logits, batch.labels.as_deref(), train.num_classes);
        }
        let test_acc = test_accuracy(&d.student, test)?;
        let rec = totals.record(epoch, lr, test_acc, start.elapsed().as_secs_f64());
        progress(&rec);
        records.push(rec);
    }
    Ok(DistillOutcome { student: d.student, heads: d.heads, state: d.state, mapping: d.mapping, records })
}

/// Distillation without labels (γ = 0).
pub fn transfer_distill(
    teacher: &Model,
    student: Model,
    target: &Dataset,
    opts: &DistillOptions,
    progress: &mut dyn FnMut(&MetricsRecord),
) -> Result<DistillOutcome> {
    let mut opts = opts.clone();
    opts.loss.gamma = 0.0;
    distill(teacher, student, &target.unlabeled(), None, &opts, progress)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::contrastive::CriticParams;
    use crate::data::make_synthetic;
    use crate::model::ModelSpec;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn spec(s: &str) -> ModelSpec {
        s.parse().unwrap()
    }

    #[test]
    fn accuracy_cases() {
        // one-hot labels as logits
        let labels = [0usize, 3, 1, 2, 2];
        let onehot: Vec<f64> = labels.iter().flat_map(|&y| (0..4).map(move |k| f64::from(k == y))).collect();
        assert_eq!(accuracy(&onehot, 4, &labels), 1.0);
        // constant predictor on balanced labels
        let balanced: Vec<usize> = (0..100).map(|i| i % 4).collect();
        let constant: Vec<f64> = (0..100).flat_map(|_| [0.0, 1.0, 0.0, 0.0]).collect();
        assert_eq!(accuracy(&constant, 4, &balanced), 0.25);
    }

    #[test]
    fn random_logits_near_chance() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let n = 10_000;
        let logits: Vec<f64> = (0..n * 10).map(|_| rng.random::<f64>()).collect();
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..10)).collect();
        let acc = accuracy(&logits, 10, &labels);
        assert!((acc - 0.1).abs() <= 0.01, "{acc}");
    }

    #[test]
    fn zero_epochs_keeps_initialization() {
        let data = make_synthetic(2, 4, [1, 4, 4], 0).unwrap();
        let mut model = Model::build(&spec("input=1x4x4 stages=2x1 classes=2"), 3).unwrap();
        let before = model.to_checkpoint();
        let opts = RunOptions { schedule: TrainingSchedule { total_epochs: 0, decay_epochs: vec![], ..TrainingSchedule::desk() }, ..RunOptions::desk(0) };
        let recs = train_supervised(&mut model, &data, None, &opts, &mut |_| {}).unwrap();
        assert!(recs.is_empty());
        assert_eq!(model.to_checkpoint(), before);
    }

    #[test]
    fn finetune_touches_only_classifier() {
        let data = make_synthetic(2, 6, [1, 4, 4], 1).unwrap();
        let mut model = Model::build(&spec("input=1x4x4 stages=2x1,3x1/2 classes=2"), 3).unwrap();
        let before = model.to_checkpoint();
        let opts = RunOptions { schedule: TrainingSchedule::desk_with_epochs(2), batch_size: 4, ..RunOptions::desk(0) };
        let recs = finetune_linear(&mut model, &data, Some(&data), &opts, &mut |_| {}).unwrap();
        assert_eq!(recs.len(), 2);
        assert!(recs.iter().all(|r| r.test_acc.is_some()));
        let after = model.to_checkpoint();
        for (a, b) in before.arrays.iter().zip(&after.arrays) {
            if a.name.starts_with("classifier") {
                assert_ne!(a.data, b.data);
            } else {
                assert_eq!(a.data, b.data, "{}", a.name);
            }
        }
    }

    #[test]
    fn distill_leaves_teacher_untouched_and_reports_breakdown() {
        let data = make_synthetic(3, 6, [2, 4, 4], 2).unwrap();
        let teacher = Model::build(&spec("input=2x4x4 stages=4x2,6x2/2 classes=3"), 1).unwrap();
        let student = Model::build(&spec("input=2x4x4 stages=2x1,3x1/2 classes=3"), 2).unwrap();
        let before = teacher.to_checkpoint().to_bytes();
        let mut loss = LossConfig::compression(CriticParams::new(0.1, 4, data.len()).unwrap());
        loss.theta = 1.0;
        let mut opts = DistillOptions::new(RunOptions { schedule: TrainingSchedule::desk_with_epochs(2), batch_size: 5, ..RunOptions::desk(7) }, loss);
        opts.embed_dim = 8;
        let out = distill(&teacher, student, &data, Some(&data), &opts, &mut |_| {}).unwrap();
        assert_eq!(teacher.to_checkpoint().to_bytes(), before);
        assert_eq!(out.records.len(), 2);
        for r in &out.records {
            assert_eq!(r.loss_modules.len(), 2);
            let rebuilt = r.loss_ce + r.loss_ckt + r.loss_distill;
            assert!((r.loss_total - rebuilt).abs() < 1e-12, "{r:?}");
        }
    }

    #[test]
    fn transfer_has_no_ce() {
        let data = make_synthetic(3, 6, [2, 4, 4], 2).unwrap();
        let teacher = Model::build(&spec("input=2x4x4 stages=4x2,6x2/2 classes=3"), 1).unwrap();
        let student = Model::build(&spec("input=2x4x4 stages=2x1,3x1/2 classes=3"), 2).unwrap();
        let loss = LossConfig::compression(CriticParams::new(0.1, 4, data.len()).unwrap());
        let mut opts = DistillOptions::new(RunOptions { schedule: TrainingSchedule::desk_with_epochs(2), batch_size: 5, ..RunOptions::desk(7) }, loss);
        opts.embed_dim = 8;
        let out = transfer_distill(&teacher, student, &data, &opts, &mut |_| {}).unwrap();
        for r in &out.records {
            assert_eq!(r.loss_ce, 0.0);
            assert_eq!(r.loss_total, r.loss_ckt);
            assert!(r.train_acc.is_none());
        }
    }

    #[test]
    fn frozen_teacher_heads_keep_initial_weights() {
        let data = make_synthetic(3, 6, [2, 4, 4], 2).unwrap();
        let teacher = Model::build(&spec("input=2x4x4 stages=4x2,6x2/2 classes=3"), 1).unwrap();
        let student = Model::build(&spec("input=2x4x4 stages=2x1,3x1/2 classes=3"), 2).unwrap();
        let loss = LossConfig::compression(CriticParams::new(0.1, 4, data.len()).unwrap());
        let run = RunOptions { schedule: TrainingSchedule::desk_with_epochs(1), batch_size: 6, ..RunOptions::desk(7) };
        let mut opts = DistillOptions::new(run, loss);
        opts.embed_dim = 8;
        opts.train_teacher_heads = false;
        opts.critic_norm = CriticNorm::FirstBatch;
        let mut d = Distiller::new(&teacher, student.clone(), &data, &opts).unwrap();
        let initial = d.heads.clone();
        let batch = data.batch(&[0, 1, 2, 3, 4, 5]).unwrap();
        d.step(&batch, 0).unwrap();
        for (old, new) in initial.modules.iter().chain([&initial.penultimate]).zip(d.heads.modules.iter().chain([&d.heads.penultimate])) {
            for (a, b) in old.teacher.parameters().iter().zip(new.teacher.parameters()) {
                assert_eq!(a.tensor.data(), b.tensor.data());
            }
            for (a, b) in old.student.parameters().iter().zip(new.student.parameters()) {
                assert_ne!(a.tensor.data(), b.tensor.data());
            }
        }
        assert!((0..3).all(|site| d.state.log_z(site).is_some()));
    }
}
