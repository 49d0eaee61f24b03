//! Contrastive transfer objectives.
//!
//! For one contrastive site (a module tap or the penultimate layer) the
//! student embedding of sample `i` is the anchor, the teacher embedding of
//! the same sample is the positive, and `N` teacher-side embeddings of other
//! samples are the negatives. Each pair is scored by the critic
//!
//! ```text
//! f(u, v) = exp(u·v / τ) / (exp(u·v / τ) + N / N_d)
//! ```
//!
//! and the per-anchor loss is `-log(f(pos) / (f(pos) + Σ_neg f(neg)))`,
//! averaged over the batch. The denominator contains the positive term, so
//! the loss is never negative and equals `log(N + 1)` when every score ties.
//!
//! Negatives normally come from a [`MemoryBank`] holding one unit vector per
//! training sample, per side, per site. Bank entries are constants for the
//! backward pass.

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{shape_err, Error, Result};
use crate::model::{ArrayKind, NamedArray};
use crate::projection::{pool_and_flatten, EmbeddingBatch, HeadPair, HeadSet};
use crate::tensor::{self, Tensor};

pub const DEFAULT_TAU: f64 = 0.1;
pub const DEFAULT_NEGATIVES: usize = 16384;
pub const DESK_NEGATIVES: usize = 64;
pub const DEFAULT_BANK_MOMENTUM: f64 = 0.5;

/// Critic hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CriticParams {
    /// Temperature τ.
    pub tau: f64,
    /// Negatives per anchor, N.
    pub num_negatives: usize,
    /// Training-set size, N_d.
    pub dataset_size: usize,
}

impl CriticParams {
    pub fn new(tau: f64, num_negatives: usize, dataset_size: usize) -> Result<Self> {
        let p = Self { tau, num_negatives, dataset_size };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::Parameter(format!("tau must be positive, got {}", self.tau)));
        }
        if self.num_negatives == 0 || self.dataset_size == 0 {
            return Err(Error::Parameter("num_negatives and dataset_size must be positive".into()));
        }
        Ok(())
    }

    /// `ln(N / N_d)`, the additive offset of the critic in log space.
    pub fn log_ratio(&self) -> f64 {
        (self.num_negatives as f64 / self.dataset_size as f64).ln()
    }
}

/// Weights of the module-level and penultimate contrastive terms.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CktWeights {
    pub alpha1: f64,
    pub alpha2: f64,
}

impl Default for CktWeights {
    fn default() -> Self {
        Self { alpha1: 0.8, alpha2: 0.2 }
    }
}

impl CktWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("alpha1", self.alpha1), ("alpha2", self.alpha2)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Parameter(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

/// Critic score of two unit vectors, evaluated as
/// `sigmoid(u·v/τ - ln(N/N_d))` so that small τ cannot overflow.
pub fn critic_f(u: &[f64], v: &[f64], params: &CriticParams) -> Result<f64> {
    params.validate()?;
    if u.len() != v.len() {
        return Err(shape_err!("critic: vectors of length {} and {}", u.len(), v.len()));
    }
    let dot = u.iter().zip(v).fold(0.0, |a, (x, y)| a + x * y);
    if !dot.is_finite() {
        return Err(Error::Degenerate(format!("critic: non-finite similarity {dot}")));
    }
    Ok(tensor::sigmoid(dot / params.tau - params.log_ratio()))
}

/// Batch-mean contrastive loss of student `anchor` embeddings against
/// teacher `positives`, with `negatives` of shape `[B, N, d]`.
///
/// Negatives may be live tensors (in-batch mode), in which case gradients
/// reach them too.
pub fn nce_loss(
    anchor: &EmbeddingBatch,
    positives: &EmbeddingBatch,
    negatives: &Tensor,
    params: &CriticParams,
) -> Result<Tensor> {
    nce_loss_normalized(anchor, positives, negatives, params, 0.0)
}

/// [`nce_loss`] with the critic `exp(s/τ) / (exp(s/τ) + Z·N/N_d)`, i.e. the
/// exponentiated score divided by a normalizing constant `Z` before the
/// comparison with the noise ratio. `log_z = 0` is the plain critic.
pub fn nce_loss_normalized(
    anchor: &EmbeddingBatch,
    positives: &EmbeddingBatch,
    negatives: &Tensor,
    params: &CriticParams,
    log_z: f64,
) -> Result<Tensor> {
    let scores = pair_scores(anchor, positives, negatives, params)?;
    let b = anchor.len();
    // log f = -softplus(ln(N/N_d) + ln Z - s/τ)
    let log_f = tensor::neg(&tensor::softplus(&tensor::add_scalar(
        &tensor::scale(&scores, -1.0 / params.tau),
        params.log_ratio() + log_z,
    )));
    let log_ratio = tensor::log_softmax(&log_f, 1.0)?;
    Ok(tensor::neg(&tensor::mean(&tensor::gather_cols(&log_ratio, &vec![0; b])?)))
}

/// `ln Z` with `Z = N_d · mean(exp(s/τ))` over every positive and negative
/// score of one batch. Estimated once and then held fixed.
pub fn estimate_log_z(
    anchor: &EmbeddingBatch,
    positives: &EmbeddingBatch,
    negatives: &Tensor,
    params: &CriticParams,
) -> Result<f64> {
    let scores = pair_scores(anchor, positives, negatives, params)?;
    let z: Vec<f64> = scores.data().iter().map(|s| s / params.tau).collect();
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sum = z.iter().fold(0.0, |a, v| a + (v - max).exp());
    Ok((params.dataset_size as f64).ln() + max + (sum / z.len() as f64).ln())
}

/// `[B, 1 + N]` dot products: the positive first, then the negatives.
fn pair_scores(
    anchor: &EmbeddingBatch,
    positives: &EmbeddingBatch,
    negatives: &Tensor,
    params: &CriticParams,
) -> Result<Tensor> {
    params.validate()?;
    if anchor.sample_indices != positives.sample_indices {
        return Err(Error::Usage("anchor and positive sample indices differ".into()));
    }
    let (b, d) = (anchor.len(), anchor.dim());
    if positives.dim() != d {
        return Err(shape_err!("anchor dim {d} but positive dim {}", positives.dim()));
    }
    match negatives.shape() {
        &[nb, n, nd] if nb == b && nd == d => {
            if n != params.num_negatives {
                return Err(Error::Usage(format!(
                    "{n} negatives supplied but critic expects N = {}",
                    params.num_negatives
                )));
            }
        }
        other => return Err(shape_err!("negatives must be [{b}, N, {d}], got {other:?}")),
    }

    let pos = tensor::batched_dot(&anchor.values, &tensor::reshape(&positives.values, &[b, 1, d])?)?;
    let neg = tensor::batched_dot(&anchor.values, negatives)?;
    tensor::concat_cols(&[&pos, &neg])
}

/// `α1 · Σ module_losses + α2 · pen_loss`.
///
/// Terms whose weight is exactly zero are left out of the computation
/// record, so they contribute neither value nor gradient.
pub fn l_ckt(module_losses: &[Tensor], pen_loss: &Tensor, w: &CktWeights) -> Result<Tensor> {
    w.validate()?;
    let mut terms = Vec::new();
    if w.alpha1 != 0.0 && !module_losses.is_empty() {
        let mut acc = module_losses[0].clone();
        for l in &module_losses[1..] {
            acc = tensor::add(&acc, l)?;
        }
        terms.push(tensor::scale(&acc, w.alpha1));
    }
    if w.alpha2 != 0.0 {
        terms.push(tensor::scale(pen_loss, w.alpha2));
    }
    let mut it = terms.into_iter();
    let Some(mut total) = it.next() else {
        return Ok(Tensor::scalar(0.0));
    };
    for t in it {
        total = tensor::add(&total, &t)?;
    }
    Ok(total)
}

/// For each anchor index, `n` distinct indices drawn uniformly from
/// `[0, dataset_size)` without the anchor itself.
pub fn sample_negative_indices(
    anchor_indices: &[usize],
    n: usize,
    dataset_size: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Vec<usize>>> {
    if dataset_size == 0 || n > dataset_size - 1 {
        return Err(Error::Parameter(format!(
            "cannot draw {n} negatives from {dataset_size} samples without the anchor"
        )));
    }
    anchor_indices
        .iter()
        .map(|&a| {
            if a >= dataset_size {
                return Err(Error::Usage(format!("anchor index {a} outside dataset of {dataset_size}")));
            }
            Ok(index::sample(rng, dataset_size - 1, n)
                .into_iter()
                .map(|k| if k >= a { k + 1 } else { k })
                .collect())
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    Teacher,
    Student,
}

impl Side {
    fn slot(self) -> usize {
        match self {
            Side::Teacher => 0,
            Side::Student => 1,
        }
    }
}

/// Per-sample unit vectors for every (site, side).
#[derive(Debug, Clone)]
pub struct MemoryBank {
    dim: usize,
    size: usize,
    momentum: f64,
    /// `sites[s][side]` is a row-major `[size, dim]` buffer.
    sites: Vec<[Vec<f64>; 2]>,
}

fn normalize_in_place(v: &mut [f64]) -> Result<()> {
    let n = v.iter().fold(0.0, |a, x| a + x * x).sqrt();
    if !(n >= tensor::L2_EPSILON) {
        return Err(Error::Degenerate(format!("bank slot norm {n:e} too small")));
    }
    v.iter_mut().for_each(|x| *x /= n);
    Ok(())
}

impl MemoryBank {
    /// A bank filled with seeded random unit vectors.
    pub fn new(num_sites: usize, dataset_size: usize, dim: usize, momentum: f64, seed: u64) -> Result<Self> {
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::Parameter(format!("bank momentum must be in [0, 1), got {momentum}")));
        }
        if dataset_size == 0 || dim == 0 {
            return Err(Error::Parameter("bank needs positive size and dimension".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut random_side = || -> Result<Vec<f64>> {
            let mut buf: Vec<f64> = (0..dataset_size * dim).map(|_| StandardNormal.sample(&mut rng)).collect();
            for row in buf.chunks_exact_mut(dim) {
                normalize_in_place(row)?;
            }
            Ok(buf)
        };
        let sites = (0..num_sites)
            .map(|_| Ok([random_side()?, random_side()?]))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { dim, size: dataset_size, momentum, sites })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn num_sites(&self) -> usize {
        self.sites.len()
    }

    pub fn momentum(&self) -> f64 {
        self.momentum
    }

    fn side(&self, site: usize, side: Side) -> Result<&[f64]> {
        self.sites
            .get(site)
            .map(|s| s[side.slot()].as_slice())
            .ok_or_else(|| Error::Usage(format!("bank has no site {site}")))
    }

    pub fn slot(&self, site: usize, side: Side, i: usize) -> Result<&[f64]> {
        if i >= self.size {
            return Err(Error::Usage(format!("bank slot {i} out of range 0..{}", self.size)));
        }
        Ok(&self.side(site, side)?[i * self.dim..(i + 1) * self.dim])
    }

    /// Overwrites one slot with the normalized `value`.
    pub fn set_slot(&mut self, site: usize, side: Side, i: usize, value: &[f64]) -> Result<()> {
        if value.len() != self.dim {
            return Err(shape_err!("slot value has length {}, bank dim is {}", value.len(), self.dim));
        }
        if i >= self.size {
            return Err(Error::Usage(format!("bank slot {i} out of range 0..{}", self.size)));
        }
        let dim = self.dim;
        let buf = self
            .sites
            .get_mut(site)
            .ok_or_else(|| Error::Usage(format!("bank has no site {site}")))?;
        let slot = &mut buf[side.slot()][i * dim..(i + 1) * dim];
        slot.copy_from_slice(value);
        normalize_in_place(slot)
    }

    /// `slot[i] <- normalize(momentum · slot[i] + (1 - momentum) · e_i)` for
    /// every sample of the batch.
    pub fn update(&mut self, site: usize, side: Side, embeddings: &EmbeddingBatch) -> Result<()> {
        if embeddings.dim() != self.dim {
            return Err(shape_err!("bank dim {} but embeddings dim {}", self.dim, embeddings.dim()));
        }
        if let Some(bad) = embeddings.sample_indices.iter().find(|&&i| i >= self.size) {
            return Err(Error::Usage(format!("sample index {bad} out of bank range 0..{}", self.size)));
        }
        let (dim, m) = (self.dim, self.momentum);
        let buf = self
            .sites
            .get_mut(site)
            .ok_or_else(|| Error::Usage(format!("bank has no site {site}")))?;
        let buf = &mut buf[side.slot()];
        for (r, &i) in embeddings.sample_indices.iter().enumerate() {
            let slot = &mut buf[i * dim..(i + 1) * dim];
            for (s, e) in slot.iter_mut().zip(embeddings.row(r)) {
                *s = m * *s + (1.0 - m) * e;
            }
            normalize_in_place(slot)?;
        }
        Ok(())
    }

    /// Constant `[B, N, d]` tensor of the given slots.
    pub fn gather(&self, site: usize, side: Side, indices: &[Vec<usize>]) -> Result<Tensor> {
        let b = indices.len();
        let n = indices.first().map_or(0, Vec::len);
        let mut out = Vec::with_capacity(b * n * self.dim);
        for row in indices {
            if row.len() != n {
                return Err(shape_err!("ragged negative index table"));
            }
            for &i in row {
                out.extend_from_slice(self.slot(site, side, i)?);
            }
        }
        Tensor::new(out, &[b, n, self.dim])
    }

    /// Draws `n` negatives per anchor from the bank without replacement.
    pub fn sample_negatives(
        &self,
        site: usize,
        side: Side,
        anchor_indices: &[usize],
        n: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Tensor> {
        let idx = sample_negative_indices(anchor_indices, n, self.size, rng)?;
        self.gather(site, side, &idx)
    }

    pub fn to_arrays(&self) -> Vec<NamedArray> {
        let mut out = Vec::new();
        for (s, sides) in self.sites.iter().enumerate() {
            for (side, buf) in ["teacher", "student"].iter().zip(sides) {
                out.push(NamedArray {
                    name: format!("bank.site{s}.{side}"),
                    kind: ArrayKind::Bank,
                    shape: vec![self.size, self.dim],
                    data: buf.clone(),
                });
            }
        }
        out
    }
}

/// Live negatives taken from the other samples of the batch: anchor `i`
/// uses the positives of samples `i+1, …, i+N` (mod B). Needs `B - 1 >= N`.
pub fn in_batch_negatives(positives: &EmbeddingBatch, n: usize) -> Result<Tensor> {
    let b = positives.len();
    if b == 0 || n > b - 1 {
        return Err(Error::Parameter(format!("in-batch mode needs B - 1 >= N, got B = {b}, N = {n}")));
    }
    let idx: Vec<usize> = (0..b).flat_map(|i| (1..=n).map(move |k| (i + k) % b)).collect();
    tensor::reshape(&tensor::index_rows(&positives.values, &idx)?, &[b, n, positives.dim()])
}

/// Where negatives come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NegativeSource {
    Bank,
    InBatch,
}

impl NegativeSource {
    pub fn as_str(self) -> &'static str {
        match self {
            NegativeSource::Bank => "bank",
            NegativeSource::InBatch => "in_batch",
        }
    }
}

impl std::fmt::Display for NegativeSource {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for NegativeSource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bank" => Ok(NegativeSource::Bank),
            "in_batch" => Ok(NegativeSource::InBatch),
            other => Err(Error::Config(format!("unknown negative source `{other}` (bank|in_batch)"))),
        }
    }
}

/// Loss at one contrastive site, with the embeddings it was computed from.
#[derive(Debug, Clone)]
pub struct SiteLoss {
    pub site: usize,
    pub loss: Tensor,
    pub teacher: EmbeddingBatch,
    pub student: EmbeddingBatch,
}

/// How the exponentiated critic score is scaled before it meets the noise
/// ratio `N/N_d`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum CriticNorm {
    /// `exp(s/τ)` as is.
    #[default]
    None,
    /// Divided by a per-site constant `Z` estimated from the first batch
    /// (see [`estimate_log_z`]).
    FirstBatch,
}

impl CriticNorm {
    pub fn as_str(self) -> &'static str {
        match self {
            CriticNorm::None => "none",
            CriticNorm::FirstBatch => "first_batch",
        }
    }
}

impl std::fmt::Display for CriticNorm {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for CriticNorm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(CriticNorm::None),
            "first_batch" => Ok(CriticNorm::FirstBatch),
            other => Err(Error::Config(format!("unknown critic normalization `{other}` (none|first_batch)"))),
        }
    }
}

/// Memory bank, critic parameters and the negative-sampling stream.
#[derive(Debug, Clone)]
pub struct ContrastiveState {
    pub bank: MemoryBank,
    pub params: CriticParams,
    pub source: NegativeSource,
    pub norm: CriticNorm,
    /// Per-site `ln Z`, filled on first use under [`CriticNorm::FirstBatch`].
    log_z: Vec<Option<f64>>,
    rng: ChaCha8Rng,
}

impl ContrastiveState {
    /// Banks for `num_modules` module sites plus the penultimate site.
    pub fn new(num_modules: usize, params: CriticParams, embed_dim: usize, momentum: f64, seed: u64) -> Result<Self> {
        params.validate()?;
        if params.num_negatives > params.dataset_size.saturating_sub(1) {
            return Err(Error::Parameter(format!(
                "N = {} exceeds N_d - 1 = {}",
                params.num_negatives,
                params.dataset_size.saturating_sub(1)
            )));
        }
        Ok(Self {
            bank: MemoryBank::new(num_modules + 1, params.dataset_size, embed_dim, momentum, seed)?,
            params,
            source: NegativeSource::Bank,
            norm: CriticNorm::None,
            log_z: vec![None; num_modules + 1],
            rng: ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15),
        })
    }

    pub fn with_source(mut self, source: NegativeSource) -> Self {
        self.source = source;
        self
    }

    pub fn with_norm(mut self, norm: CriticNorm) -> Self {
        self.norm = norm;
        self
    }

    /// The normalizing constant of a site, once estimated.
    pub fn log_z(&self, site: usize) -> Option<f64> {
        self.log_z.get(site).copied().flatten()
    }

    /// Restores constants saved from an earlier run.
    pub fn set_log_z(&mut self, site: usize, value: f64) -> Result<()> {
        let n = self.log_z.len();
        let slot = self.log_z.get_mut(site).ok_or_else(|| Error::Usage(format!("site {site} outside 0..{n}")))?;
        *slot = Some(value);
        Ok(())
    }

    pub fn penultimate_site(&self) -> usize {
        self.bank.num_sites() - 1
    }

    fn site_loss(&mut self, site: usize, heads: &HeadPair, teacher_flat: &Tensor, student_flat: &Tensor, indices: &[usize]) -> Result<SiteLoss> {
        let teacher = heads.teacher.project(teacher_flat, indices)?;
        let student = heads.student.project(student_flat, indices)?;
        let negatives = match self.source {
            NegativeSource::Bank => {
                self.bank
                    .sample_negatives(site, Side::Teacher, indices, self.params.num_negatives, &mut self.rng)?
            }
            NegativeSource::InBatch => in_batch_negatives(&teacher, self.params.num_negatives)?,
        };
        let log_z = match self.norm {
            CriticNorm::None => 0.0,
            CriticNorm::FirstBatch => match self.log_z[site] {
                Some(z) => z,
                None => {
                    let z = estimate_log_z(&student, &teacher, &negatives, &self.params)?;
                    self.log_z[site] = Some(z);
                    z
                }
            },
        };
        let loss = nce_loss_normalized(&student, &teacher, &negatives, &self.params, log_z)?;
        Ok(SiteLoss { site, loss, teacher, student })
    }

    /// Module-level losses: pool, project and contrast every mapped pair.
    pub fn l_mckt(
        &mut self,
        teacher_reps: &[Tensor],
        student_reps: &[Tensor],
        heads: &HeadSet,
        indices: &[usize],
    ) -> Result<Vec<SiteLoss>> {
        if teacher_reps.len() != student_reps.len() || teacher_reps.len() != heads.modules.len() {
            return Err(Error::Usage(format!(
                "module counts differ: teacher {}, student {}, heads {}",
                teacher_reps.len(),
                student_reps.len(),
                heads.modules.len()
            )));
        }
        if heads.modules.len() + 1 != self.bank.num_sites() {
            return Err(Error::Usage("bank site count does not match heads".into()));
        }
        teacher_reps
            .iter()
            .zip(student_reps)
            .zip(&heads.modules)
            .enumerate()
            .map(|(m, ((t, s), pair))| self.site_loss(m, pair, &pool_and_flatten(t)?, &pool_and_flatten(s)?, indices))
            .collect()
    }

    /// Penultimate-layer loss on `[B, p]` vectors.
    pub fn l_pckt(&mut self, teacher_pen: &Tensor, student_pen: &Tensor, heads: &HeadSet, indices: &[usize]) -> Result<SiteLoss> {
        let site = self.penultimate_site();
        self.site_loss(site, &heads.penultimate, teacher_pen, student_pen, indices)
    }

    /// Writes the step's (detached) embeddings into both sides of the bank.
    pub fn update_bank(&mut self, sites: &[SiteLoss]) -> Result<()> {
        for s in sites {
            self.bank.update(s.site, Side::Teacher, &s.teacher)?;
            self.bank.update(s.site, Side::Student, &s.student)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::projection::{make_heads, HeadKind};
    use rand::Rng;

    fn unit(v: &[f64]) -> Vec<f64> {
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.iter().map(|x| x / n).collect()
    }

    fn batch(rows: &[Vec<f64>], idx: &[usize]) -> EmbeddingBatch {
        let d = rows[0].len();
        let t = Tensor::new(rows.concat(), &[rows.len(), d]).unwrap();
        EmbeddingBatch::new(t, idx.to_vec()).unwrap()
    }

    #[test]
    fn critic_zero_similarity() {
        let p = CriticParams::new(1.0, 100, 100).unwrap();
        assert!((critic_f(&[1.0, 0.0], &[0.0, 1.0], &p).unwrap() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn critic_unit_similarity() {
        // e^2 / (e^2 + 1) = 0.8807970779778823...
        let p = CriticParams::new(0.5, 100, 100).unwrap();
        let v = critic_f(&[1.0, 0.0], &[1.0, 0.0], &p).unwrap();
        assert!((v - 0.880_797_077_977_882_3).abs() < 1e-15);
    }

    #[test]
    fn critic_small_tau_stays_finite() {
        // 50-digit mpmath: 1/(1 + (64/400)·e^{-10})
        let p = CriticParams::new(0.1, 64, 400).unwrap();
        let v = critic_f(&[1.0, 0.0], &[1.0, 0.0], &p).unwrap();
        assert!((v - 0.999_992_736_064_003_151_872_7).abs() < 1e-12);
        // τ = 0.01, u·v = -1: 1/(1 + 0.16·e^{100}) = 2.3250474850130224768e-43
        let p = CriticParams::new(0.01, 64, 400).unwrap();
        let v = critic_f(&[1.0], &[-1.0], &p).unwrap();
        assert!((v - 2.325_047_485_013_022_4e-43).abs() < 1e-12 * 2.3e-43);
        let v = critic_f(&[1.0], &[1.0], &p).unwrap();
        assert!(v.is_finite() && v <= 1.0);
        assert!(matches!(critic_f(&[f64::INFINITY], &[1.0], &p), Err(Error::Degenerate(_))));
    }

    #[test]
    fn uniform_scores_give_log_n_plus_one() {
        // all embeddings identical: every dot product is 1
        let e = vec![unit(&[1.0, 2.0, 2.0]); 2];
        let a = batch(&e, &[0, 1]);
        let negs = Tensor::new([e[0].clone(), e[0].clone(), e[0].clone()].concat().repeat(2), &[2, 3, 3]).unwrap();
        let p = CriticParams::new(0.1, 3, 10).unwrap();
        let l = nce_loss(&a, &a, &negs, &p).unwrap().item().unwrap();
        assert!((l - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn dominant_positive_scalar_oracle() {
        let a = batch(&[vec![1.0, 0.0, 0.0]], &[0]);
        let p = CriticParams::new(0.1, 2, 10).unwrap();
        let f = |s: f64| (s / 0.1f64).exp() / ((s / 0.1f64).exp() + 0.2);

        // orthogonal negatives keep f(neg) = 1 / (1 + N/N_d), so the loss stays O(1)
        let ortho = Tensor::new(vec![0.0, 1.0, 0.0, 0.0, 0.0, 1.0], &[1, 2, 3]).unwrap();
        let l = nce_loss(&a, &a, &ortho, &p).unwrap().item().unwrap();
        let expected = -(f(1.0) / (f(1.0) + 2.0 * f(0.0))).ln();
        assert!((l - expected).abs() < 1e-12);

        // antipodal negatives drive it below 1e-3
        let anti = Tensor::new(vec![-1.0, 0.0, 0.0, -1.0, 0.0, 0.0], &[1, 2, 3]).unwrap();
        let l = nce_loss(&a, &a, &anti, &p).unwrap().item().unwrap();
        let expected = -(f(1.0) / (f(1.0) + 2.0 * f(-1.0))).ln();
        assert!((l - expected).abs() < 1e-12);
        assert!(l < 1e-3 && l > 0.0);
    }

    #[test]
    fn normalized_critic_matches_direct_formula() {
        let a = batch(&[vec![1.0, 0.0, 0.0]], &[0]);
        let p = CriticParams::new(0.1, 2, 10).unwrap();
        let negs = Tensor::new(vec![0.0, 1.0, 0.0, -0.6, 0.8, 0.0], &[1, 2, 3]).unwrap();
        let log_z: f64 = 7.5;
        let f = |s: f64| (s / 0.1f64).exp() / ((s / 0.1f64).exp() + log_z.exp() * 0.2);
        let l = nce_loss_normalized(&a, &a, &negs, &p, log_z).unwrap().item().unwrap();
        let expected = -(f(1.0) / (f(1.0) + f(0.0) + f(-0.6))).ln();
        assert!((l - expected).abs() < 1e-12);
        assert_eq!(
            nce_loss_normalized(&a, &a, &negs, &p, 0.0).unwrap().item().unwrap(),
            nce_loss(&a, &a, &negs, &p).unwrap().item().unwrap()
        );
    }

    #[test]
    fn log_z_of_tied_scores() {
        // every score equal to s gives Z = N_d · exp(s/τ)
        let a = batch(&[vec![1.0, 0.0], vec![0.0, 1.0]], &[0, 1]);
        let negs = Tensor::new(vec![1.0, 0.0, 1.0, 0.0, 0.0, 1.0, 0.0, 1.0], &[2, 2, 2]).unwrap();
        let p = CriticParams::new(0.5, 2, 40).unwrap();
        let z = estimate_log_z(&a, &a, &negs, &p).unwrap();
        assert!((z - (40f64.ln() + 2.0)).abs() < 1e-12);
        // small τ stays finite
        let p = CriticParams::new(1e-3, 2, 40).unwrap();
        assert!((estimate_log_z(&a, &a, &negs, &p).unwrap() - (40f64.ln() + 1e3)).abs() < 1e-9);
    }

    #[test]
    fn first_batch_constant_is_frozen() {
        let heads = make_heads(&[3], &[2], (3, 2), 4, HeadKind::Linear, 1).unwrap();
        let mut st = ContrastiveState::new(1, CriticParams::new(0.1, 3, 8).unwrap(), 4, 0.5, 2)
            .unwrap()
            .with_norm(CriticNorm::FirstBatch);
        assert_eq!(st.log_z(0), None);
        let t = Tensor::new((0..6).map(|v| v as f64 * 0.3 - 0.7).collect(), &[2, 3]).unwrap();
        let s = Tensor::new(vec![0.4, -0.2, 0.9, 0.1], &[2, 2]).unwrap();
        st.l_pckt(&t, &s, &heads, &[0, 1]).unwrap();
        let z = st.log_z(1).unwrap();
        st.l_pckt(&t, &s, &heads, &[2, 3]).unwrap();
        assert_eq!(st.log_z(1), Some(z));
        assert_eq!(st.log_z(0), None);
        assert_eq!("first_batch".parse::<CriticNorm>().unwrap(), CriticNorm::FirstBatch);
        assert!(matches!("z".parse::<CriticNorm>(), Err(Error::Config(_))));
    }

    #[test]
    fn rejects_mismatches() {
        let a = batch(&[vec![1.0, 0.0]], &[0]);
        let b = batch(&[vec![1.0, 0.0]], &[1]);
        let negs = Tensor::new(vec![0.0, 1.0], &[1, 1, 2]).unwrap();
        let p = CriticParams::new(0.1, 1, 10).unwrap();
        assert!(matches!(nce_loss(&a, &b, &negs, &p), Err(Error::Usage(_))));
        let p2 = CriticParams::new(0.1, 2, 10).unwrap();
        assert!(matches!(nce_loss(&a, &a, &negs, &p2), Err(Error::Usage(_))));
    }

    #[test]
    fn l_ckt_arithmetic() {
        let s = Tensor::scalar;
        let w = CktWeights::default();
        let v = l_ckt(&[s(1.0), s(1.0)], &s(2.0), &w).unwrap().item().unwrap();
        assert!((v - 2.0).abs() < 1e-15);
        let w0 = CktWeights { alpha1: 0.0, alpha2: 0.2 };
        assert!((l_ckt(&[s(5.0)], &s(3.0), &w0).unwrap().item().unwrap() - 0.6).abs() < 1e-15);
        let w1 = CktWeights { alpha1: 0.8, alpha2: 0.0 };
        assert!((l_ckt(&[s(3.0)], &s(9.0), &w1).unwrap().item().unwrap() - 2.4).abs() < 1e-15);
        let wz = CktWeights { alpha1: 0.0, alpha2: 0.0 };
        assert_eq!(l_ckt(&[s(3.0)], &s(9.0), &wz).unwrap().item().unwrap(), 0.0);
        assert!(CktWeights { alpha1: -1.0, alpha2: 0.0 }.validate().is_err());
    }

    #[test]
    fn bank_update_rules() {
        let mut bank = MemoryBank::new(1, 3, 2, 0.0, 1).unwrap();
        let e = batch(&[vec![0.6, 0.8]], &[2]);
        bank.update(0, Side::Teacher, &e).unwrap();
        assert_eq!(bank.slot(0, Side::Teacher, 2).unwrap(), &[0.6, 0.8]);

        let mut bank = MemoryBank::new(1, 3, 2, 0.7, 1).unwrap();
        let current = bank.slot(0, Side::Student, 1).unwrap().to_vec();
        bank.update(0, Side::Student, &batch(&[current.clone()], &[1])).unwrap();
        for (a, b) in bank.slot(0, Side::Student, 1).unwrap().iter().zip(&current) {
            assert!((a - b).abs() < 1e-15);
        }

        let mut bank = MemoryBank::new(1, 1, 2, 0.5, 1).unwrap();
        bank.set_slot(0, Side::Teacher, 0, &[1.0, 0.0]).unwrap();
        bank.update(0, Side::Teacher, &batch(&[vec![0.0, 1.0]], &[0])).unwrap();
        let h = std::f64::consts::FRAC_1_SQRT_2;
        let s = bank.slot(0, Side::Teacher, 0).unwrap();
        assert!((s[0] - h).abs() < 1e-15 && (s[1] - h).abs() < 1e-15);

        assert!(matches!(bank.update(0, Side::Teacher, &batch(&[vec![1.0, 0.0]], &[5])), Err(Error::Usage(_))));
    }

    #[test]
    fn bank_slots_start_unit() {
        let bank = MemoryBank::new(2, 20, 7, 0.5, 3).unwrap();
        for site in 0..2 {
            for side in [Side::Teacher, Side::Student] {
                for i in 0..20 {
                    let n: f64 = bank.slot(site, side, i).unwrap().iter().map(|v| v * v).sum::<f64>().sqrt();
                    assert!((n - 1.0).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn exhaustive_negatives() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let idx = sample_negative_indices(&[3, 0], 9, 10, &mut rng).unwrap();
        for (row, a) in idx.iter().zip([3, 0]) {
            let mut s = row.clone();
            s.sort();
            let expected: Vec<usize> = (0..10).filter(|&i| i != a).collect();
            assert_eq!(s, expected);
        }
        assert!(matches!(sample_negative_indices(&[0], 10, 10, &mut rng), Err(Error::Parameter(_))));
    }

    #[test]
    fn negatives_never_contain_anchor() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..10_000 {
            let a = rng.random_range(0..20);
            let row = &sample_negative_indices(&[a], 5, 20, &mut rng).unwrap()[0];
            assert!(!row.contains(&a));
            let mut s = row.clone();
            s.sort();
            s.dedup();
            assert_eq!(s.len(), 5);
        }
    }

    #[test]
    fn negatives_deterministic() {
        let draw = || {
            let mut rng = ChaCha8Rng::seed_from_u64(99);
            sample_negative_indices(&[1, 2, 3], 4, 50, &mut rng).unwrap()
        };
        assert_eq!(draw(), draw());
    }

    #[test]
    fn in_batch_negatives_are_live() {
        let rows = vec![unit(&[1.0, 0.2]), unit(&[0.3, 1.0]), unit(&[-1.0, 0.5])];
        let t = Tensor::param(rows.concat(), &[3, 2]).unwrap();
        let e = EmbeddingBatch::new(t.clone(), vec![0, 1, 2]).unwrap();
        let negs = in_batch_negatives(&e, 2).unwrap();
        assert_eq!(negs.shape(), &[3, 2, 2]);
        assert_eq!(&negs.data()[..2], &rows[1][..]);
        let p = CriticParams::new(0.5, 2, 3).unwrap();
        nce_loss(&e, &e, &negs, &p).unwrap().backward().unwrap();
        assert!(t.grad().is_some());
        assert!(in_batch_negatives(&e, 3).is_err());
    }

    #[test]
    fn single_site_reduces_to_nce() {
        let heads = make_heads(&[3], &[2], (3, 2), 4, HeadKind::Linear, 0).unwrap();
        let params = CriticParams::new(0.2, 3, 6).unwrap();
        let mut state = ContrastiveState::new(1, params, 4, 0.5, 7).unwrap();
        let mut replay = state.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let t = Tensor::new((0..2 * 3 * 2 * 2).map(|_| rng.random_range(0.1..1.0)).collect(), &[2, 3, 2, 2]).unwrap();
        let s = Tensor::new((0..2 * 2 * 2 * 2).map(|_| rng.random_range(0.1..1.0)).collect(), &[2, 2, 2, 2]).unwrap();
        let idx = [4, 1];
        let got = state.l_mckt(&[t.clone()], &[s.clone()], &heads, &idx).unwrap();
        assert_eq!(got.len(), 1);

        let gt = heads.modules[0].teacher.project(&pool_and_flatten(&t).unwrap(), &idx).unwrap();
        let gs = heads.modules[0].student.project(&pool_and_flatten(&s).unwrap(), &idx).unwrap();
        let negs = replay.bank.sample_negatives(0, Side::Teacher, &idx, 3, &mut replay.rng).unwrap();
        let direct = nce_loss(&gs, &gt, &negs, &params).unwrap();
        assert_eq!(got[0].loss.item().unwrap(), direct.item().unwrap());
    }

    #[test]
    fn identical_sites_equal_losses() {
        let heads_one = make_heads(&[3], &[2], (3, 2), 4, HeadKind::Linear, 0).unwrap();
        let mut heads = heads_one.clone();
        heads.modules = vec![heads_one.modules[0].clone(); 3];
        let params = CriticParams::new(0.2, 3, 4).unwrap();
        let mut state = ContrastiveState::new(3, params, 4, 0.5, 7).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let t = Tensor::new((0..4 * 3).map(|_| rng.random_range(0.1..1.0)).collect(), &[4, 3, 1, 1]).unwrap();
        let s = Tensor::new((0..4 * 2).map(|_| rng.random_range(0.1..1.0)).collect(), &[4, 2, 1, 1]).unwrap();
        // N = B - 1 with in-batch negatives makes every site see the same negatives
        state.source = NegativeSource::InBatch;
        let got = state
            .l_mckt(&vec![t; 3], &vec![s; 3], &heads, &[0, 1, 2, 3])
            .unwrap();
        let v: Vec<f64> = got.iter().map(|s| s.loss.item().unwrap()).collect();
        assert_eq!(v[0], v[1]);
        assert_eq!(v[1], v[2]);
        assert!(matches!(state.l_mckt(&[], &[], &heads, &[0]), Err(Error::Usage(_))));
    }
}
