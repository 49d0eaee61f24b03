//! Pairing of teacher and student conv layers inside each module.
//!
//! The student side is always the last conv layer of its module. The teacher
//! side is picked by one of five strategies.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{shape_err, Error, Result};
use crate::model::Model;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum MappingKind {
    TeacherFirst,
    #[default]
    TeacherLast,
    TeacherRandom,
    CosineMax,
    CosineMin,
}

impl MappingKind {
    pub const ALL: [MappingKind; 5] = [
        MappingKind::TeacherFirst,
        MappingKind::TeacherLast,
        MappingKind::TeacherRandom,
        MappingKind::CosineMax,
        MappingKind::CosineMin,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            MappingKind::TeacherFirst => "teacher_first",
            MappingKind::TeacherLast => "teacher_last",
            MappingKind::TeacherRandom => "teacher_random",
            MappingKind::CosineMax => "cosine_max",
            MappingKind::CosineMin => "cosine_min",
        }
    }

    pub fn needs_probe(self) -> bool {
        matches!(self, MappingKind::CosineMax | MappingKind::CosineMin)
    }
}

impl fmt::Display for MappingKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for MappingKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        MappingKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown mapping strategy `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct MappingStrategy {
    pub kind: MappingKind,
    /// Only read by `teacher_random`.
    pub seed: u64,
}

/// Per-module `(teacher_layer, student_layer)` pairs in global layer indexing.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerMapping {
    pub pairs: Vec<(usize, usize)>,
    /// Cosine score of every candidate teacher layer per module, when the
    /// strategy computed them.
    pub scores: Option<Vec<Vec<f64>>>,
}

impl LayerMapping {
    pub fn teacher_taps(&self) -> Vec<usize> {
        self.pairs.iter().map(|p| p.0).collect()
    }

    pub fn student_taps(&self) -> Vec<usize> {
        self.pairs.iter().map(|p| p.1).collect()
    }
}

/// `teacher:student` pairs separated by commas, e.g. `2:1,5:3`.
impl fmt::Display for LayerMapping {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.pairs.iter().map(|(t, s)| format!("{t}:{s}")).collect();
        f.write_str(&parts.join(","))
    }
}

/// Mean over the batch of row-wise cosine similarity between `[B, n]` inputs.
pub fn cosine_score(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.rank() != 2 || a.shape() != b.shape() {
        return Err(shape_err!("cosine_score on {:?} and {:?}", a.shape(), b.shape()));
    }
    let n = a.shape()[1];
    rows_cosine(a.data(), b.data(), n)
}

fn rows_cosine(a: &[f64], b: &[f64], n: usize) -> Result<f64> {
    let rows = a.len() / n.max(1);
    if rows == 0 || n == 0 {
        return Err(Error::Degenerate("cosine over an empty batch".into()));
    }
    let mut total = 0.0;
    for (i, (ra, rb)) in a.chunks_exact(n).zip(b.chunks_exact(n)).enumerate() {
        let na = ra.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nb = rb.iter().map(|x| x * x).sum::<f64>().sqrt();
        if na == 0.0 || nb == 0.0 {
            return Err(Error::Degenerate(format!("row {i} has zero norm")));
        }
        let dot: f64 = ra.iter().zip(rb).map(|(x, y)| x * y).sum();
        total += (dot / (na * nb)).clamp(-1.0, 1.0);
    }
    Ok(total / rows as f64)
}

/// `[B, C, H, W]` to per-sample channel means `[B, C]`.
fn channel_means(rep: &Tensor) -> Result<(Vec<f64>, usize)> {
    let &[b, c, h, w] = rep.shape() else {
        return Err(shape_err!("expected a rank-4 activation, got {:?}", rep.shape()));
    };
    let hw = h * w;
    let means = rep.data().chunks_exact(hw).map(|p| p.iter().sum::<f64>() / hw as f64).collect();
    debug_assert_eq!(b * c * hw, rep.numel());
    Ok((means, c))
}

/// Shrinks each `[n]` row to `len` entries by averaging contiguous bins.
fn bin_average(rows: &[f64], n: usize, len: usize) -> Vec<f64> {
    if n == len {
        return rows.to_vec();
    }
    let mut out = Vec::with_capacity(rows.len() / n * len);
    for row in rows.chunks_exact(n) {
        for j in 0..len {
            let (lo, hi) = (j * n / len, (j + 1) * n / len);
            out.push(row[lo..hi].iter().sum::<f64>() / (hi - lo) as f64);
        }
    }
    out
}

/// Cosine scores of every teacher layer in each module against the student's
/// last layer of that module, on one probe batch.
pub fn cosine_scores(teacher: &Model, student: &Model, probe: &Tensor) -> Result<Vec<Vec<f64>>> {
    check_modules(teacher, student)?;
    let t_all = teacher.forward_all(&probe.detach())?;
    let s_all = student.forward_all(&probe.detach())?;
    (0..teacher.num_modules())
        .map(|m| {
            let (s_means, s_c) = channel_means(&s_all.layers[student.last_layer(m)])?;
            teacher
                .module_layers(m)
                .map(|l| {
                    let (t_means, t_c) = channel_means(&t_all.layers[l])?;
                    let len = t_c.min(s_c);
                    rows_cosine(&bin_average(&t_means, t_c, len), &bin_average(&s_means, s_c, len), len)
                })
                .collect()
        })
        .collect()
}

fn check_modules(teacher: &Model, student: &Model) -> Result<()> {
    if teacher.num_modules() != student.num_modules() {
        return Err(Error::Spec(format!(
            "teacher has {} modules, student has {}",
            teacher.num_modules(),
            student.num_modules()
        )));
    }
    Ok(())
}

/// Index of the first maximum (or minimum) entry.
fn pick(scores: &[f64], max: bool) -> usize {
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate().skip(1) {
        if (max && s > scores[best]) || (!max && s < scores[best]) {
            best = i;
        }
    }
    best
}

pub fn map_layers(
    strategy: &MappingStrategy,
    teacher: &Model,
    student: &Model,
    probe: Option<&Tensor>,
) -> Result<LayerMapping> {
    check_modules(teacher, student)?;
    let modules = 0..teacher.num_modules();
    let student_of = |m: usize| student.last_layer(m);
    let (teacher_layers, scores): (Vec<usize>, _) = match strategy.kind {
        MappingKind::TeacherFirst => (modules.map(|m| teacher.module_layers(m).start).collect(), None),
        MappingKind::TeacherLast => (modules.map(|m| teacher.last_layer(m)).collect(), None),
        MappingKind::TeacherRandom => {
            let mut rng = ChaCha8Rng::seed_from_u64(strategy.seed);
            (modules.map(|m| rng.random_range(teacher.module_layers(m))).collect(), None)
        }
        MappingKind::CosineMax | MappingKind::CosineMin => {
            let probe = probe.ok_or_else(|| {
                Error::Usage(format!("mapping strategy {} needs a probe batch", strategy.kind))
            })?;
            let scores = cosine_scores(teacher, student, probe)?;
            let max = strategy.kind == MappingKind::CosineMax;
            let chosen = scores
                .iter()
                .enumerate()
                .map(|(m, s)| teacher.module_layers(m).start + pick(s, max))
                .collect();
            (chosen, Some(scores))
        }
    };
    Ok(LayerMapping {
        pairs: teacher_layers.into_iter().enumerate().map(|(m, t)| (t, student_of(m))).collect(),
        scores,
    })
}
